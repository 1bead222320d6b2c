//! Command-line driver: generation, memory build/verify, training,
//! evaluation, sweeps, and figure exports, all driven by one JSON config.
//!
//! Exit codes: 0 success, 1 verification failure, 2 invalid config/usage.

use crate::analysis::{evaluate_partial, export_attention_heatmap, EvalReport};
use crate::config::{EvalScopeConfig, ExperimentConfig, MemoryKind, WorldKind, OUT_ENV};
use crate::error::{IcError, Result};
use crate::memory::{construct_memory, verify_memory, MlpParams};
use crate::rng::{stream_rng, Stream};
use crate::training::{
    run_adam_partial, run_pgd, run_pretrain_pipeline, Optimizer, RunTrace, TrainConfig,
};
use crate::vocab::{
    dataset_stats, enumerate_sequences, sample_ic_sequence, DatasetFile, EmbeddingBasis,
    IcSequence, KnowledgeWorld,
};
use clap::{Parser, Subcommand, ValueEnum};
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ic-recall", about = "In-context recall experiment runner")]
pub struct Cli {
    /// Experiment config (JSON). Required for everything except `figure`,
    /// which carries its own per-figure defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides config and the env default).
    #[arg(long, global = true, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Override the training seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker pool size for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MemoryAction {
    Build,
    Verify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Seeds,
    Samples,
    #[value(alias = "t")]
    Temperature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FigureId {
    #[value(name = "2a")]
    F2a,
    #[value(name = "2b")]
    F2b,
    #[value(name = "3")]
    F3,
    #[value(name = "4a")]
    F4a,
    #[value(name = "4b")]
    F4b,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the knowledge world and sample the dataset.
    Gen,
    /// Construct or check the associative-memory MLP.
    Memory { action: MemoryAction },
    /// Run the configured training loop and write the trace.
    Train,
    /// Evaluate a trained state (a summary.json produced by `train`).
    Eval { state: PathBuf },
    /// Repeat training along one axis and aggregate the results.
    Sweep { axis: SweepAxis },
    /// Run a canned experiment and export its plot-ready data.
    Figure {
        #[arg(long = "figure")]
        figure: FigureId,
    },
}

/// Parse args, run, and translate errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                IcError::InvalidArgs(_)
                | IcError::InvalidTemperature(_)
                | IcError::Malformed { .. }
                | IcError::Unsupported(_) => EXIT_CONFIG,
                _ => EXIT_VERIFY,
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| IcError::InvalidArgs("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    apply_overrides(&mut cfg, cli);
    Ok(cfg)
}

fn apply_overrides(cfg: &mut ExperimentConfig, cli: &Cli) {
    if let Some(out) = &cli.out {
        cfg.outputs.dir = Some(out.clone());
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
}

fn ensure_out(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    // archive the effective config next to the outputs
    cfg.save(&dir.join("config.json"))?;
    Ok(dir)
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gen => cmd_gen(&load_config(&cli)?),
        Command::Memory { action } => cmd_memory(&load_config(&cli)?, action),
        Command::Train => cmd_train(&load_config(&cli)?),
        Command::Eval { ref state } => {
            let state = state.clone();
            cmd_eval(&load_config(&cli)?, &state)
        }
        Command::Sweep { axis } => cmd_sweep(&load_config(&cli)?, axis, cli.workers),
        Command::Figure { figure } => cmd_figure(figure, &cli),
    }
}

/// dataset_size = 0 means the full enumeration (population objective).
fn build_dataset(cfg: &ExperimentConfig, world: &KnowledgeWorld) -> Result<Vec<IcSequence>> {
    if cfg.task.dataset_size == 0 {
        enumerate_sequences(world, cfg.task.k)
    } else {
        let mut rng = stream_rng(cfg.train.seed, Stream::Dataset);
        (0..cfg.task.dataset_size)
            .map(|_| sample_ic_sequence(world, cfg.task.k, &mut rng))
            .collect()
    }
}

fn cmd_gen(cfg: &ExperimentConfig) -> Result<i32> {
    let out = ensure_out(cfg)?;
    let world = cfg.world.build()?;
    let dataset = build_dataset(cfg, &world)?;
    let stats = dataset_stats(&dataset);
    let file = DatasetFile::new(&world, dataset);
    std::fs::write(out.join("world.json"), serde_json::to_string_pretty(&world)?)?;
    std::fs::write(out.join("dataset.json"), serde_json::to_string_pretty(&file)?)?;
    std::fs::write(out.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    println!(
        "world n={} m={} | {} sequences | p_conf={:.4} p_mis={:.4}",
        world.n, world.m, stats.sample_count, stats.p_conf, stats.p_mis
    );
    Ok(EXIT_OK)
}

fn cmd_memory(cfg: &ExperimentConfig, action: MemoryAction) -> Result<i32> {
    let out = ensure_out(cfg)?;
    let world = cfg.world.build()?;
    let basis = EmbeddingBasis::new(&world, cfg.task.k, cfg.model.embedding, cfg.world.seed);
    let path = out.join("memory.json");
    let mlp = match action {
        MemoryAction::Build => {
            let mlp = construct_memory(&world, &basis);
            mlp.save_json(&path)?;
            if cfg.outputs.emit_csv {
                mlp.save_csv(&out.join("memory.csv"))?;
            }
            mlp
        }
        MemoryAction::Verify => MlpParams::load_json(&path)?,
    };
    let report = verify_memory(&mlp, &world, &basis);
    std::fs::write(out.join("memory_report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "memory d_mlp={} | probes={} failures={} ties={}",
        mlp.d_mlp, report.probes, report.failures, report.ties
    );
    Ok(if report.failures == 0 { EXIT_OK } else { EXIT_VERIFY })
}

fn train_once(cfg: &ExperimentConfig, world: &KnowledgeWorld, dataset: &[IcSequence]) -> Result<RunTrace> {
    match cfg.train.optimizer {
        Optimizer::Gd => run_pgd(&cfg.train, world, dataset),
        Optimizer::Adam => run_adam_partial(&cfg.train, world, dataset),
    }
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<i32> {
    let out = ensure_out(cfg)?;
    let world = cfg.world.build()?;
    let dataset = build_dataset(cfg, &world)?;
    match cfg.model.memory {
        MemoryKind::Constructed => {
            let trace = train_once(cfg, &world, &dataset)?;
            if cfg.outputs.emit_csv {
                trace.write_csv(&out.join("trace.csv"))?;
            }
            trace.write_summary_json(&out.join("summary.json"))?;
            let v = crate::linalg::softmax(&trace.theta);
            let q = crate::linalg::softmax(&trace.omega);
            if cfg.outputs.emit_svg {
                export_attention_heatmap(
                    &v,
                    &q,
                    &out.join("attention.csv"),
                    &out.join("attention.svg"),
                )?;
            }
            let loss = trace.final_loss.as_ref();
            println!(
                "train done | stage1={} stage2={} | L1={:.6} L2={:.6}",
                trace.stage1_iters,
                trace.stage2_iters,
                loss.map_or(f64::NAN, |l| l.l1),
                loss.map_or(f64::NAN, |l| l.l2),
            );
        }
        MemoryKind::Pretrained => {
            let basis =
                EmbeddingBasis::new(&world, cfg.task.k, cfg.model.embedding, cfg.world.seed);
            let d_mlp = cfg.model.d_mlp_for(world.n);
            let (model, outcome) =
                run_pretrain_pipeline(&cfg.train, &world, &basis, &dataset, d_mlp, 2000)?;
            model.mlp.save_json(&out.join("memory.json"))?;
            std::fs::write(out.join("pretrain.json"), serde_json::to_string_pretty(&outcome)?)?;
            if cfg.outputs.emit_svg {
                export_attention_heatmap(
                    &outcome.v,
                    &outcome.q,
                    &out.join("attention.csv"),
                    &out.join("attention.svg"),
                )?;
            }
            println!(
                "pretrain done | triplet_acc={:.4} ({} iters) | fine-tune {} iters | loss={:.6}",
                outcome.triplet_accuracy,
                outcome.pretrain_iters,
                outcome.finetune_iters,
                outcome.final_loss
            );
        }
    }
    Ok(EXIT_OK)
}

fn cmd_eval(cfg: &ExperimentConfig, state: &Path) -> Result<i32> {
    let out = ensure_out(cfg)?;
    let text = std::fs::read_to_string(state)?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| IcError::Malformed {
        path: state.display().to_string(),
        reason: e.to_string(),
    })?;
    let vec_field = |k: &str| -> Result<Vec<f64>> {
        serde_json::from_value(doc.get(k).cloned().unwrap_or(serde_json::Value::Null)).map_err(
            |e| IcError::Malformed {
                path: state.display().to_string(),
                reason: format!("{k}: {e}"),
            },
        )
    };
    let theta = vec_field("theta")?;
    let omega = vec_field("omega")?;
    let world = cfg.world.build()?;
    let report = evaluate_partial(&world, &theta, &omega, cfg.task.scope(cfg.train.seed))?;
    std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    print_report(&report);
    Ok(EXIT_OK)
}

fn print_report(report: &EvalReport) {
    println!(
        "eval over {} sequences | acc1={:.4} acc2={:.4} end-to-end={:.4} | conf={:.4} mis={:.4} other={:.4}",
        report.sequences,
        report.acc1,
        report.acc2,
        report.acc_end_to_end,
        report.acc1_confusing,
        report.acc1_mismatched,
        report.acc1_other
    );
}

#[derive(Debug, Clone)]
struct SweepRow {
    axis: f64,
    seed: u64,
    report: EvalReport,
}

fn sweep_task(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let world = cfg.world.build()?;
    let dataset = build_dataset(cfg, &world)?;
    let trace = train_once(cfg, &world, &dataset)?;
    evaluate_partial(&world, &trace.theta, &trace.omega, cfg.task.scope(cfg.train.seed))
}

fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, workers: usize) -> Result<i32> {
    let out = ensure_out(cfg)?;
    let seeds: Vec<u64> = (0..10).collect();
    // (axis value, per-task config)
    let tasks: Vec<(f64, ExperimentConfig)> = match axis {
        SweepAxis::Seeds => seeds
            .iter()
            .map(|&s| {
                let mut c = cfg.clone();
                c.train.seed = s;
                (s as f64, c)
            })
            .collect(),
        SweepAxis::Samples => [1usize, 2, 4, 8, 16, 32, 64]
            .iter()
            .flat_map(|&count| {
                seeds.iter().map(move |&s| {
                    let mut c = cfg.clone();
                    c.task.dataset_size = count;
                    c.train.seed = s;
                    (count as f64, c)
                })
            })
            .collect(),
        SweepAxis::Temperature => [0.01, 0.02, 0.05, 0.1, 0.2]
            .iter()
            .flat_map(|&t| {
                seeds.iter().map(move |&s| {
                    let mut c = cfg.clone();
                    c.train.temperature = t;
                    c.train.eta1 = t * t;
                    c.train.eta2 = t * t;
                    c.train.seed = s;
                    (t, c)
                })
            })
            .collect(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| IcError::InvalidArgs(format!("worker pool: {e}")))?;
    let rows: Result<Vec<SweepRow>> = pool.install(|| {
        use rayon::prelude::*;
        tasks
            .par_iter()
            .map(|(axis, c)| {
                sweep_task(c).map(|report| SweepRow { axis: *axis, seed: c.train.seed, report })
            })
            .collect()
    });
    let mut rows = rows?;
    rows.sort_by(|a, b| (a.axis, a.seed).partial_cmp(&(b.axis, b.seed)).unwrap());

    let mut csv = String::from("axis,seed,sequences,acc1,acc2,acc_end_to_end\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.axis, r.seed, r.report.sequences, r.report.acc1, r.report.acc2,
            r.report.acc_end_to_end
        ));
    }
    std::fs::write(out.join("sweep.csv"), &csv)?;

    // mean/std per axis value
    let mut summary = String::from("axis,runs,acc1_mean,acc1_std,acc2_mean,acc2_std\n");
    let mut values: Vec<f64> = rows.iter().map(|r| r.axis).collect();
    values.dedup();
    for v in values {
        let group: Vec<&SweepRow> = rows.iter().filter(|r| r.axis == v).collect();
        let stat = |f: &dyn Fn(&SweepRow) -> f64| -> (f64, f64) {
            let xs: Vec<f64> = group.iter().map(|r| f(r)).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
            (mean, var.sqrt())
        };
        let (m1, s1) = stat(&|r| r.report.acc1);
        let (m2, s2) = stat(&|r| r.report.acc2);
        summary.push_str(&format!("{},{},{m1:.6},{s1:.6},{m2:.6},{s2:.6}\n", v, group.len()));
        println!("axis={v} acc1={m1:.4}±{s1:.4} acc2={m2:.4}±{s2:.4} ({} runs)", group.len());
    }
    std::fs::write(out.join("sweep_summary.csv"), &summary)?;
    Ok(EXIT_OK)
}

/// Canned per-figure configs at their published hyperparameters.
fn figure_config(figure: FigureId) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::example();
    match figure {
        FigureId::F2a | FigureId::F3 | FigureId::F4a => {
            cfg.world.n = 8;
            cfg.world.m = 64;
            cfg.world.kind = WorldKind::Unconstrained;
            cfg.task.k = 2;
            cfg.task.dataset_size = 256;
            cfg.task.eval_scope = EvalScopeConfig::Sample { count: 10_000 };
            cfg.train = TrainConfig::equal_steps(0.05);
            cfg.train.optimizer = Optimizer::Adam;
            cfg.train.adam_iters = 25_000;
        }
        FigureId::F2b | FigureId::F4b => {
            cfg.world.n = 8;
            cfg.world.m = 512;
            cfg.world.kind = WorldKind::Unconstrained;
            cfg.task.k = 3;
            cfg.task.dataset_size = 256;
            cfg.task.eval_scope = EvalScopeConfig::Sample { count: 10_000 };
            cfg.train = TrainConfig::equal_steps(0.01);
            cfg.train.optimizer = Optimizer::Adam;
            cfg.train.adam_iters = 25_000;
        }
    }
    if matches!(figure, FigureId::F4a | FigureId::F4b) {
        cfg.model.memory = MemoryKind::Pretrained;
        cfg.train.adam_iters = 12_000;
    }
    if matches!(figure, FigureId::F3) {
        cfg.train.adam_iters = 2_000;
    }
    cfg
}

fn cmd_figure(figure: FigureId, cli: &Cli) -> Result<i32> {
    let mut cfg = if cli.config.is_some() { load_config(cli)? } else { figure_config(figure) };
    if cli.config.is_none() {
        apply_overrides(&mut cfg, cli);
    }
    match figure {
        FigureId::F2a | FigureId::F2b | FigureId::F4a | FigureId::F4b => cmd_train(&cfg),
        FigureId::F3 => {
            let out = cfg.out_dir();
            let code = cmd_sweep(&cfg, SweepAxis::Samples, cli.workers)?;
            if cfg.outputs.emit_svg {
                write_accuracy_curve_svg(&out.join("sweep_summary.csv"), &out.join("figure3.svg"))?;
            }
            Ok(code)
        }
    }
}

/// Minimal line plot (log-x) of acc1 mean±std from a sweep summary CSV.
fn write_accuracy_curve_svg(summary_csv: &Path, svg_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(summary_csv)?;
    let mut pts: Vec<(f64, f64, f64)> = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() >= 4 {
            let parse = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
            pts.push((parse(cols[0]), parse(cols[2]), parse(cols[3])));
        }
    }
    if pts.is_empty() {
        return Err(IcError::Malformed {
            path: summary_csv.display().to_string(),
            reason: "no data rows".into(),
        });
    }
    let (w, h, ml, mb) = (520.0, 360.0, 60.0, 50.0);
    let xmin = pts.first().unwrap().0.ln();
    let xmax = pts.last().unwrap().0.ln().max(xmin + 1e-9);
    let sx = |x: f64| ml + (x.ln() - xmin) / (xmax - xmin) * (w - ml - 20.0);
    let sy = |y: f64| (h - mb) - y.clamp(0.0, 1.0) * (h - mb - 20.0);
    let mut f = std::fs::File::create(svg_path)?;
    writeln!(f, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#)?;
    writeln!(f, r#"<rect width="{w}" height="{h}" fill="white"/>"#)?;
    writeln!(
        f,
        r#"<line x1="{ml}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        h - mb,
        w - 20.0
    )?;
    writeln!(f, r#"<line x1="{ml}" y1="20" x2="{ml}" y2="{}" stroke="black"/>"#, h - mb)?;
    for gy in [0.0f64, 0.25, 0.5, 0.75, 1.0] {
        writeln!(
            f,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{gy:.2}</text>"#,
            ml - 6.0,
            sy(gy) + 4.0
        )?;
    }
    let path: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1))).collect();
    writeln!(
        f,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        path.join(" ")
    )?;
    for (x, m, s) in &pts {
        writeln!(
            f,
            r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="steelblue"/>"#,
            sx(*x),
            sy(m - s),
            sy(m + s)
        )?;
        writeln!(f, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#, sx(*x), sy(*m))?;
        writeln!(
            f,
            r#"<text x="{:.1}" y="{}" font-size="11" text-anchor="middle">{x}</text>"#,
            sx(*x),
            h - mb + 16.0
        )?;
    }
    writeln!(f, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">samples</text>"#, (w + ml) / 2.0, h - 12.0)?;
    writeln!(f, r#"<text x="16" y="{}" font-size="12" transform="rotate(-90 16 {0})" text-anchor="middle">accuracy</text>"#, h / 2.0)?;
    writeln!(f, "</svg>")?;
    Ok(())
}
