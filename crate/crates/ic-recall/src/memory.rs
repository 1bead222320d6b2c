//! Quadratic-activation MLP layers: the exact associative-memory
//! construction, plus a trainable container for the pretraining pipeline.
//!
//! The constructed memory stores every fact triplet (s, r, a) with
//! r(s) = a so that argmax readout of `phi(u)^T V^T (W x)^2` recovers the
//! third element of a triplet from the sum of the other two embeddings.

use crate::error::{IcError, Result};
use crate::linalg::{axpy, Mat};
use crate::vocab::{EmbeddingBasis, KnowledgeWorld};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParams {
    pub d: usize,
    pub d_mlp: usize,
    /// d_mlp x d
    pub w: Mat,
    /// d_mlp x d
    pub v: Mat,
    pub frozen: bool,
}

impl MlpParams {
    /// f_MLP(x) = V^T (W x)^2.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for row in 0..self.d_mlp {
            let pre = crate::linalg::dot(self.w.row(row), x);
            if pre != 0.0 {
                axpy(pre * pre, self.v.row(row), &mut out);
            }
        }
        out
    }

    /// Forward pass for an input that is a sparse combination of basis
    /// columns: x = sum coeff_i * e_{idx_i}. Exact same result as
    /// `forward` in one-hot mode, much cheaper.
    pub fn forward_sparse(&self, terms: &[(usize, f64)]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for row in 0..self.d_mlp {
            let mut pre = 0.0;
            for &(idx, c) in terms {
                pre += self.w.get(row, idx) * c;
            }
            if pre != 0.0 {
                axpy(pre * pre, self.v.row(row), &mut out);
            }
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let doc = serde_json::json!({
            "d": self.d,
            "d_mlp": self.d_mlp,
            "W": self.w.data,
            "V": self.v.data,
        });
        std::fs::write(path, serde_json::to_string(&doc)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| IcError::Malformed {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let get = |k: &str| -> Result<&serde_json::Value> {
            doc.get(k).ok_or_else(|| IcError::Malformed {
                path: path.display().to_string(),
                reason: format!("missing field {k}"),
            })
        };
        let d = get("d")?.as_u64().unwrap_or(0) as usize;
        let d_mlp = get("d_mlp")?.as_u64().unwrap_or(0) as usize;
        let parse_mat = |k: &str| -> Result<Mat> {
            let data: Vec<f64> = serde_json::from_value(get(k)?.clone()).map_err(|e| {
                IcError::Malformed { path: path.display().to_string(), reason: e.to_string() }
            })?;
            if data.len() != d_mlp * d {
                return Err(IcError::Malformed {
                    path: path.display().to_string(),
                    reason: format!("{k} has {} entries, expected {}", data.len(), d_mlp * d),
                });
            }
            Ok(Mat { rows: d_mlp, cols: d, data })
        };
        let w = parse_mat("W")?;
        let v = parse_mat("V")?;
        Ok(MlpParams { d, d_mlp, w, v, frozen: true })
    }

    /// Compact CSV alternative: one `W`-row line then one `V`-row line per
    /// memory row, prefixed with the row kind.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("# d={} d_mlp={}\n", self.d, self.d_mlp));
        for row in 0..self.d_mlp {
            let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
            out.push_str(&format!("W,{}\n", fmt(self.w.row(row))));
            out.push_str(&format!("V,{}\n", fmt(self.v.row(row))));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let malformed = |reason: String| IcError::Malformed {
            path: path.display().to_string(),
            reason,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| malformed("empty file".into()))?;
        let mut d = 0;
        let mut d_mlp = 0;
        for part in header.trim_start_matches('#').split_whitespace() {
            if let Some(v) = part.strip_prefix("d=") {
                d = v.parse().map_err(|_| malformed("bad d".into()))?;
            } else if let Some(v) = part.strip_prefix("d_mlp=") {
                d_mlp = v.parse().map_err(|_| malformed("bad d_mlp".into()))?;
            }
        }
        let mut w = Vec::new();
        let mut v = Vec::new();
        for line in lines {
            let (kind, rest) = line.split_once(',').ok_or_else(|| malformed("bad row".into()))?;
            let vals: Vec<f64> = rest
                .split(',')
                .map(|t| t.parse().map_err(|_| malformed(format!("bad number {t:?}"))))
                .collect::<Result<_>>()?;
            if vals.len() != d {
                return Err(malformed(format!("row length {} != d {}", vals.len(), d)));
            }
            match kind {
                "W" => w.extend(vals),
                "V" => v.extend(vals),
                _ => return Err(malformed(format!("unknown row kind {kind:?}"))),
            }
        }
        if w.len() != d_mlp * d || v.len() != d_mlp * d {
            return Err(malformed("row count mismatch".into()));
        }
        Ok(MlpParams {
            d,
            d_mlp,
            w: Mat { rows: d_mlp, cols: d, data: w },
            v: Mat { rows: d_mlp, cols: d, data: v },
            frozen: true,
        })
    }
}

/// Exact associative memory: 3 rows per (s, a) pair.
pub fn construct_memory(world: &KnowledgeWorld, basis: &EmbeddingBasis) -> MlpParams {
    let d = basis.d;
    let n = world.n;
    let d_mlp = 3 * n * n;
    let mut w = Mat::zeros(d_mlp, d);
    let mut v = Mat::zeros(d_mlp, d);
    for s in 0..n {
        for a in 0..n {
            let i = s * n + a;
            let mut rel_sum = vec![0.0; d];
            for &r in world.relations_at(s, a) {
                axpy(1.0, basis.phi(world.relation_token(r)), &mut rel_sum);
            }
            let phi_s = basis.phi(world.subject_token(s));
            let phi_a = basis.phi(world.answer_token(a));
            // key phi(s) + sum phi(r)  ->  value phi(a)
            axpy(1.0, phi_s, w.row_mut(3 * i));
            axpy(1.0, &rel_sum, w.row_mut(3 * i));
            axpy(1.0, phi_a, v.row_mut(3 * i));
            // key phi(a) + phi(s)  ->  value sum phi(r)
            axpy(1.0, phi_a, w.row_mut(3 * i + 1));
            axpy(1.0, phi_s, w.row_mut(3 * i + 1));
            axpy(1.0, &rel_sum, v.row_mut(3 * i + 1));
            // key phi(a) + sum phi(r)  ->  value phi(s)
            axpy(1.0, phi_a, w.row_mut(3 * i + 2));
            axpy(1.0, &rel_sum, w.row_mut(3 * i + 2));
            axpy(1.0, phi_s, v.row_mut(3 * i + 2));
        }
    }
    MlpParams { d, d_mlp, w, v, frozen: true }
}

/// Gaussian-initialized trainable MLP (std 1/sqrt(d_mlp)).
pub fn init_trainable(d: usize, d_mlp: usize, seed: u64) -> MlpParams {
    let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Init);
    let std = 1.0 / (d_mlp as f64).sqrt();
    MlpParams {
        d,
        d_mlp,
        w: Mat::gaussian(d_mlp, d, std, &mut rng),
        v: Mat::gaussian(d_mlp, d, std, &mut rng),
        frozen: false,
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct VerifyReport {
    pub probes: usize,
    pub failures: usize,
    pub ties: usize,
}

/// Argmax over the full vocabulary, lowest token id wins ties; also counts
/// how many tokens tie with the winner.
pub fn argmax_token(logits: &[f64]) -> (usize, usize) {
    let mut best = 0usize;
    for (u, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = u;
        }
    }
    let ties = logits.iter().filter(|&&x| x == logits[best]).count() - 1;
    (best, ties)
}

/// Check all triplets x 3 leave-one-out directions. The "predict relation"
/// direction accepts any relation in R(s, a).
pub fn verify_memory(mlp: &MlpParams, world: &KnowledgeWorld, basis: &EmbeddingBasis) -> VerifyReport {
    let mut report = VerifyReport::default();
    let one_hot = basis.mode == crate::vocab::EmbeddingMode::OneHot;
    let probe = |tokens: [usize; 2]| -> Vec<f64> {
        let f = if one_hot {
            mlp.forward_sparse(&[(tokens[0], 1.0), (tokens[1], 1.0)])
        } else {
            let mut x = vec![0.0; basis.d];
            axpy(1.0, basis.phi(tokens[0]), &mut x);
            axpy(1.0, basis.phi(tokens[1]), &mut x);
            mlp.forward(&x)
        };
        basis.token_logits(&f)
    };
    for r in 0..world.m {
        for s in 0..world.n {
            let a = world.apply(r, s);
            let (ts, tr, ta) = (
                world.subject_token(s),
                world.relation_token(r),
                world.answer_token(a),
            );
            // predict the answer
            let (got, ties) = argmax_token(&probe([ts, tr]));
            report.probes += 1;
            report.ties += ties;
            if got != ta {
                report.failures += 1;
            }
            // predict the subject
            let (got, ties) = argmax_token(&probe([ta, tr]));
            report.probes += 1;
            report.ties += ties;
            if got != ts {
                report.failures += 1;
            }
            // predict a relation in R(s, a)
            let (got, ties) = argmax_token(&probe([ts, ta]));
            report.probes += 1;
            report.ties += ties;
            let ok = got >= 2 * world.n
                && got < 2 * world.n + world.m
                && world.apply(got - 2 * world.n, s) == a;
            if !ok {
                report.failures += 1;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_affine_world, build_world, EmbeddingMode};

    #[test]
    fn constructed_memory_is_exact_on_small_world() {
        let world = build_world(3, 6, 0, 1_000_000).unwrap();
        let basis = EmbeddingBasis::new(&world, 2, EmbeddingMode::OneHot, 0);
        let mlp = construct_memory(&world, &basis);
        let report = verify_memory(&mlp, &world, &basis);
        assert_eq!(report.failures, 0);
        assert_eq!(report.probes, 3 * 6 * 3);
    }

    #[test]
    fn sparse_forward_matches_dense_in_one_hot_mode() {
        let world = build_affine_world(8, 0).unwrap();
        let basis = EmbeddingBasis::new(&world, 2, EmbeddingMode::OneHot, 0);
        let mlp = construct_memory(&world, &basis);
        let mut x = vec![0.0; basis.d];
        x[2] = 1.0;
        x[19] = 0.5;
        let dense = mlp.forward(&x);
        let sparse = mlp.forward_sparse(&[(2, 1.0), (19, 0.5)]);
        for (a, b) in dense.iter().zip(&sparse) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn json_and_csv_round_trip() {
        let world = build_world(3, 6, 0, 1_000_000).unwrap();
        let basis = EmbeddingBasis::new(&world, 2, EmbeddingMode::OneHot, 0);
        let mlp = construct_memory(&world, &basis);
        let dir = tempfile::tempdir().unwrap();
        let jp = dir.path().join("m.json");
        let cp = dir.path().join("m.csv");
        mlp.save_json(&jp).unwrap();
        mlp.save_csv(&cp).unwrap();
        for loaded in [MlpParams::load_json(&jp).unwrap(), MlpParams::load_csv(&cp).unwrap()] {
            assert_eq!(loaded.d, mlp.d);
            assert_eq!(loaded.d_mlp, mlp.d_mlp);
            assert_eq!(loaded.w.data, mlp.w.data);
            assert_eq!(loaded.v.data, mlp.v.data);
        }
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        std::fs::write(&p, "{\"d\": 3}").unwrap();
        assert!(matches!(MlpParams::load_json(&p), Err(IcError::Malformed { .. })));
        let c = dir.path().join("bad.csv");
        std::fs::write(&c, "# d=3 d_mlp=1\nW,1,2\nV,1,2,3\n").unwrap();
        assert!(matches!(MlpParams::load_csv(&c), Err(IcError::Malformed { .. })));
    }

    #[test]
    fn argmax_reports_ties_and_prefers_lowest_id() {
        let (best, ties) = argmax_token(&[0.5, 2.0, 2.0, 1.0]);
        assert_eq!(best, 1);
        assert_eq!(ties, 1);
    }
}
