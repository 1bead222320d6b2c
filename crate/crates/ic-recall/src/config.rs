//! Experiment configuration: one JSON document per run, archived next to
//! the outputs so every artifact can be regenerated bit-exactly.

use crate::analysis::EvalScope;
use crate::error::{IcError, Result};
use crate::training::TrainConfig;
use crate::vocab::{
    build_affine_world, build_world, build_world_unconstrained, EmbeddingMode, KnowledgeWorld,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Env var naming the default output root when `outputs.dir` is unset.
pub const OUT_ENV: &str = "IC_RECALL_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorldKind {
    /// Affine when m = n(n-1) over a supported field, plain rejection
    /// sampling when m fits it, unconstrained when m exceeds the
    /// identifiable capacity.
    Auto,
    /// Rejection-sampled identifiable world.
    Random,
    /// Uniform random relations, no identifiability constraint.
    Unconstrained,
    /// Full x -> cx + b family (m = n(n-1), exactly identifiable).
    Affine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    #[serde(default = "WorldConfig::default_kind")]
    pub kind: WorldKind,
    #[serde(default = "WorldConfig::default_max_retries")]
    pub max_retries: usize,
}

impl WorldConfig {
    fn default_kind() -> WorldKind {
        WorldKind::Auto
    }

    fn default_max_retries() -> usize {
        1_000_000
    }

    pub fn build(&self) -> Result<KnowledgeWorld> {
        match self.kind {
            WorldKind::Random => build_world(self.n, self.m, self.seed, self.max_retries),
            WorldKind::Unconstrained => build_world_unconstrained(self.n, self.m, self.seed),
            WorldKind::Affine => {
                let world = build_affine_world(self.n, self.seed)?;
                if world.m != self.m {
                    return Err(IcError::InvalidArgs(format!(
                        "affine world over n={} has m={}, config says m={}",
                        self.n, world.m, self.m
                    )));
                }
                Ok(world)
            }
            WorldKind::Auto => {
                if self.m == self.n * (self.n - 1) {
                    if let Ok(world) = build_affine_world(self.n, self.seed) {
                        return Ok(world);
                    }
                }
                if self.m > self.n * (self.n - 1) {
                    return build_world_unconstrained(self.n, self.m, self.seed);
                }
                build_world(self.n, self.m, self.seed, self.max_retries)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalScopeConfig {
    All,
    Sample { count: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskConfig {
    /// In-context examples per sequence.
    pub k: usize,
    pub dataset_size: usize,
    pub eval_scope: EvalScopeConfig,
}

impl TaskConfig {
    pub fn scope(&self, seed: u64) -> EvalScope {
        match self.eval_scope {
            EvalScopeConfig::All => EvalScope::All,
            EvalScopeConfig::Sample { count } => EvalScope::Sample { count, seed },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryKind {
    Constructed,
    Pretrained,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding: EmbeddingMode,
    /// None = 3n^2 (the constructed memory's width).
    pub d_mlp: Option<usize>,
    pub memory: MemoryKind,
}

impl ModelConfig {
    pub fn d_mlp_for(&self, n: usize) -> usize {
        self.d_mlp.unwrap_or(3 * n * n)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputConfig {
    /// None = `$IC_RECALL_OUT` or `./out`.
    pub dir: Option<PathBuf>,
    pub emit_svg: bool,
    pub emit_csv: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub outputs: OutputConfig,
}

impl ExperimentConfig {
    /// The three-subject, six-relation setting with the equal-step
    /// schedule; a reasonable starting point to edit from.
    pub fn example() -> Self {
        ExperimentConfig {
            world: WorldConfig {
                n: 3,
                m: 6,
                seed: 0,
                kind: WorldKind::Auto,
                max_retries: WorldConfig::default_max_retries(),
            },
            task: TaskConfig { k: 2, dataset_size: 0, eval_scope: EvalScopeConfig::All },
            model: ModelConfig {
                embedding: EmbeddingMode::OneHot,
                d_mlp: None,
                memory: MemoryKind::Constructed,
            },
            train: TrainConfig::equal_steps(0.02),
            outputs: OutputConfig { dir: None, emit_svg: true, emit_csv: true },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| IcError::Malformed {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.world.n < 3 {
            return Err(IcError::InvalidArgs(format!(
                "need at least 3 subjects, got n={}",
                self.world.n
            )));
        }
        if self.world.m == 0 {
            return Err(IcError::InvalidArgs("need at least one relation".into()));
        }
        if self.task.k < 1 {
            return Err(IcError::InvalidArgs("need at least one in-context example".into()));
        }
        if self.task.k + 1 > self.world.n {
            return Err(IcError::InvalidArgs(format!(
                "k={} needs {} distinct subjects but n={}",
                self.task.k,
                self.task.k + 1,
                self.world.n
            )));
        }
        self.train.validate()
    }

    /// Output directory: explicit config value, else `$IC_RECALL_OUT`,
    /// else `./out`.
    pub fn out_dir(&self) -> PathBuf {
        if let Some(dir) = &self.outputs.dir {
            return dir.clone();
        }
        std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
    }
}
