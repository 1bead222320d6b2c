//! Losses, analytic/numeric gradients, the two-stage perturbed GD
//! schedule, Adam-based fine-tuning, and the pretraining pipeline.

use crate::error::{IcError, Result};
use crate::linalg::{dot, log_sum_exp, norm2, softmax, Mat};
use crate::memory::MlpParams;
use crate::model::{step1_logits_closed_form, step2_logits_closed_form};
use crate::rng::{stream_rng, Stream};
use crate::vocab::{EmbeddingBasis, IcSequence, KnowledgeWorld};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Gd,
    Adam,
}

/// Schedule for the two-stage (perturbed) gradient descent and the
/// Adam-based experiment loops.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub temperature: f64,
    pub eta1: f64,
    pub eta2: f64,
    /// None = run stage 1 until the gradient norm drops below `grad_tol`
    /// (capped at `max_stage_iters`).
    pub t1: Option<usize>,
    pub t2: Option<usize>,
    /// None = default radius c_xi * T^3 / log^2(1/delta).
    pub xi_radius: Option<f64>,
    pub delta: f64,
    pub c_eta1: f64,
    pub c_eta2: f64,
    pub c_xi: f64,
    pub sample_count: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub adam_lr: f64,
    /// Adam iteration count for the fine-tuning loops.
    pub adam_iters: usize,
    /// Gaussian init scale for the Adam loops (PGD always starts at 0).
    /// Symmetric worlds keep zero-initialized gradients on the saddle
    /// manifold, so Adam needs a symmetry-breaking init.
    pub init_std: f64,
    pub grad_tol: f64,
    pub max_stage_iters: usize,
    pub record_stride: usize,
    /// Perturb only theta instead of the joint (theta, omega) ball.
    pub theta_only_perturbation: bool,
}

impl TrainConfig {
    /// Infinite-iteration regime: equal step sizes eta = T^2, both stages
    /// run to convergence.
    pub fn equal_steps(temperature: f64) -> Self {
        let t2 = temperature * temperature;
        TrainConfig {
            temperature,
            eta1: t2,
            eta2: t2,
            t1: None,
            t2: None,
            xi_radius: None,
            delta: 0.1,
            c_eta1: 1.0,
            c_eta2: 1.0,
            c_xi: 1.0,
            sample_count: 0,
            seed: 0,
            optimizer: Optimizer::Gd,
            adam_lr: 1e-3,
            adam_iters: 2000,
            init_std: 0.1,
            grad_tol: 1e-8,
            max_stage_iters: 1_000_000,
            record_stride: 1000,
            theta_only_perturbation: false,
        }
    }

    /// Finite-iteration regime: one large stage-1 step
    /// eta1 = T*sqrt(T)*log(1/T), then t2 = ceil((5/T) log(1/T)) steps at
    /// eta2 = T^2.
    pub fn finite_schedule(temperature: f64) -> Self {
        let log_inv_t = (1.0 / temperature).ln();
        let mut cfg = TrainConfig::equal_steps(temperature);
        cfg.eta1 = temperature * temperature.sqrt() * log_inv_t;
        cfg.eta2 = temperature * temperature;
        cfg.t1 = Some(1);
        cfg.t2 = Some(((5.0 / temperature) * log_inv_t).ceil() as usize);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(IcError::InvalidTemperature(self.temperature));
        }
        if self.eta1 <= 0.0 || self.eta2 <= 0.0 {
            return Err(IcError::InvalidArgs("step sizes must be positive".into()));
        }
        if self.xi_radius.map_or(false, |r| r < 0.0) {
            return Err(IcError::InvalidArgs("perturbation radius must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn perturbation_radius(&self) -> f64 {
        self.xi_radius.unwrap_or_else(|| {
            let log_inv_delta = (1.0 / self.delta).ln();
            self.c_xi * self.temperature.powi(3) / (log_inv_delta * log_inv_delta)
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    /// Per-sequence (l1, l2).
    pub per_seq: Vec<(f64, f64)>,
}

fn check_finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(IcError::NonFinite(what.to_string()))
    }
}

/// Cross-entropy of the target under a temperature softmax of `logits`.
fn ce(logits: &[f64], target: usize, temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    log_sum_exp(&scaled) - scaled[target]
}

/// Both chain-of-thought losses of the partial parameterization, averaged
/// over the dataset. The second step is teacher-forced on the true
/// relation.
pub fn loss_partial(
    world: &KnowledgeWorld,
    dataset: &[IcSequence],
    theta: &[f64],
    omega: &[f64],
    temperature: f64,
) -> Result<LossBreakdown> {
    if dataset.is_empty() {
        return Err(IcError::InvalidArgs("empty dataset".into()));
    }
    let v = softmax(theta);
    let q = softmax(omega);
    let mut per_seq = Vec::with_capacity(dataset.len());
    let (mut l1, mut l2) = (0.0, 0.0);
    for (idx, seq) in dataset.iter().enumerate() {
        let s1 = ce(&step1_logits_closed_form(world, seq, &v), seq.relation, temperature);
        let s2 = ce(
            &step2_logits_closed_form(world, seq, seq.relation, &q),
            seq.target_answer,
            temperature,
        );
        check_finite(s1 + s2, &format!("loss on sequence {idx}"))?;
        per_seq.push((s1, s2));
        l1 += s1;
        l2 += s2;
    }
    let inv = 1.0 / dataset.len() as f64;
    l1 *= inv;
    l2 *= inv;
    Ok(LossBreakdown { l1, l2, total: l1 + l2, per_seq })
}

/// dL1/dv for one sequence. Only cross-terms survive: the shared base
/// sum over v^2 cancels between the softmax average and the target.
fn grad_v_seq(world: &KnowledgeWorld, seq: &IcSequence, v: &[f64], temperature: f64) -> Vec<f64> {
    let k = seq.k;
    let logits = step1_logits_closed_form(world, seq, v);
    let p = softmax(&logits.iter().map(|l| l / temperature).collect::<Vec<_>>());
    // S[i][j] = sum of p_r over relations with r(s_i) = a_j, accumulated
    // in ascending relation order so that symmetric sequences produce
    // bitwise-identical partial sums
    let mut s_mat = vec![vec![0.0; k]; k + 1];
    for i in 0..=k {
        for j in 0..k {
            for &r in world.relations_at(seq.subject(i), seq.answer_index(world, j)) {
                s_mat[i][j] += p[r];
            }
        }
    }
    let mut g = vec![0.0; 2 * k + 2];
    let scale = 2.0 / temperature;
    for i in 0..=k {
        let mut acc = 0.0;
        for j in 0..k {
            acc += s_mat[i][j] * v[2 * j + 1];
        }
        if i < k {
            acc -= v[2 * i + 1];
        }
        g[2 * i] = scale * acc;
    }
    for j in 0..k {
        let mut acc = 0.0;
        for i in 0..=k {
            acc += s_mat[i][j] * v[2 * i];
        }
        acc -= v[2 * j];
        g[2 * j + 1] = scale * acc;
    }
    g
}

/// Softmax chain rule: d/dx_i = w_i (g_i - w^T g) for w = softmax(x).
fn softmax_chain(w: &[f64], g: &[f64]) -> Vec<f64> {
    let wg = dot(w, g);
    w.iter().zip(g).map(|(wi, gi)| wi * (gi - wg)).collect()
}

/// Analytic gradient of the first-step loss with respect to theta,
/// averaged over the dataset.
pub fn grad_theta_analytic(
    world: &KnowledgeWorld,
    dataset: &[IcSequence],
    theta: &[f64],
    temperature: f64,
) -> Vec<f64> {
    let v = softmax(theta);
    let mut g = vec![0.0; theta.len()];
    for seq in dataset {
        let gs = grad_v_seq(world, seq, &v, temperature);
        for (acc, x) in g.iter_mut().zip(&gs) {
            *acc += x;
        }
    }
    let inv = 1.0 / dataset.len() as f64;
    for x in &mut g {
        *x *= inv;
    }
    softmax_chain(&v, &g)
}

/// dL2/dq for one sequence, teacher-forced on the true relation.
fn grad_q_seq(world: &KnowledgeWorld, seq: &IcSequence, q: &[f64], temperature: f64) -> Vec<f64> {
    let k = seq.k;
    let rel = seq.relation;
    let logits = step2_logits_closed_form(world, seq, rel, q);
    let p = softmax(&logits.iter().map(|l| l / temperature).collect::<Vec<_>>());
    let q_last = q[2 * k + 2];
    let subjects: Vec<usize> = (0..=k).map(|i| seq.subject(i)).collect();
    // c_s(a) for s in the sequence, and for the unique preimage of a
    let coeff = |s: usize, a: usize| -> f64 {
        if world.relations_at(s, a).is_empty() {
            return 0.0;
        }
        let mut c = 0.0;
        if let Some(i) = subjects.iter().position(|&si| si == s) {
            c += q[2 * i];
        }
        if world.apply(rel, s) == a {
            c += 1.0 + q_last;
        }
        c
    };
    // D_c(a) = d l(a) / d q_c
    let d_col = |a: usize| -> Vec<f64> {
        let mut d = vec![0.0; 2 * k + 3];
        for (i, &s) in subjects.iter().enumerate() {
            d[2 * i] = 2.0 * coeff(s, a);
        }
        let preimage = (0..world.n).find(|&s| world.apply(rel, s) == a);
        if let Some(s) = preimage {
            d[2 * k + 2] = 2.0 * coeff(s, a);
        }
        d
    };
    let mut g = vec![0.0; 2 * k + 3];
    for a in 0..world.n {
        let d = d_col(a);
        let w = p[a] - if a == seq.target_answer { 1.0 } else { 0.0 };
        for (gc, dc) in g.iter_mut().zip(&d) {
            *gc += w * dc;
        }
    }
    for x in &mut g {
        *x /= temperature;
    }
    g
}

/// Analytic gradient of the second-step loss with respect to omega,
/// averaged over the dataset.
pub fn grad_omega_analytic(
    world: &KnowledgeWorld,
    dataset: &[IcSequence],
    omega: &[f64],
    temperature: f64,
) -> Vec<f64> {
    let q = softmax(omega);
    let mut g = vec![0.0; omega.len()];
    for seq in dataset {
        let gs = grad_q_seq(world, seq, &q, temperature);
        for (acc, x) in g.iter_mut().zip(&gs) {
            *acc += x;
        }
    }
    let inv = 1.0 / dataset.len() as f64;
    for x in &mut g {
        *x *= inv;
    }
    softmax_chain(&q, &g)
}

/// Central finite differences of an arbitrary scalar function.
pub fn grad_numeric<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0);
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub stage: u8,
    pub l1: f64,
    pub l2: f64,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub psi: Option<f64>,
    pub gap: f64,
    pub acc1: f64,
    pub acc2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub final_loss: Option<LossBreakdown>,
}

impl RunTrace {
    /// Streamed trace schema: one row per recorded iterate.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let k = if self.theta.len() >= 2 { (self.theta.len() - 2) / 2 } else { 0 };
        let mut f = std::fs::File::create(path)?;
        let vh: Vec<String> = (1..=2 * k + 2).map(|i| format!("v{i}")).collect();
        let qh: Vec<String> = (1..=2 * k + 3).map(|i| format!("q{i}")).collect();
        writeln!(f, "iteration,stage,L1,L2,{},{},psi,g,acc1,acc2", vh.join(","), qh.join(","))?;
        for r in &self.records {
            let nums = |xs: &[f64]| xs.iter().map(|x| format!("{x:.12e}")).collect::<Vec<_>>().join(",");
            writeln!(
                f,
                "{},{},{:.12e},{:.12e},{},{},{},{:.12e},{:.6},{:.6}",
                r.iteration,
                r.stage,
                r.l1,
                r.l2,
                nums(&r.v),
                nums(&r.q),
                r.psi.map_or("degenerate".into(), |p| format!("{p:.12e}")),
                r.gap,
                r.acc1,
                r.acc2,
            )?;
        }
        Ok(())
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let doc = serde_json::json!({
            "stage1_iters": self.stage1_iters,
            "stage2_iters": self.stage2_iters,
            "theta": self.theta,
            "omega": self.omega,
            "v": softmax(&self.theta),
            "q": softmax(&self.omega),
            "final_loss": self.final_loss,
            "records": self.records.len(),
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }
}

/// Keep every coordinate within 700 nats of the max so the softmax never
/// underflows to an exact zero that would freeze the multiplicative
/// dynamics at a NaN.
fn clamp_logits(x: &mut [f64]) {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for xi in x.iter_mut() {
        if *xi < mx - 700.0 {
            *xi = mx - 700.0;
        }
    }
}

/// Closed-form decode accuracy over a dataset (step 1 strict argmax,
/// step 2 teacher-forced).
fn trace_accuracy(world: &KnowledgeWorld, dataset: &[IcSequence], v: &[f64], q: &[f64]) -> (f64, f64) {
    let mut ok1 = 0usize;
    let mut ok2 = 0usize;
    for seq in dataset {
        let l1 = step1_logits_closed_form(world, seq, v);
        let (r, _) = crate::memory::argmax_token(&l1);
        if r == seq.relation {
            ok1 += 1;
        }
        let l2 = step2_logits_closed_form(world, seq, seq.relation, q);
        let (a, _) = crate::memory::argmax_token(&l2);
        if a == seq.target_answer {
            ok2 += 1;
        }
    }
    (ok1 as f64 / dataset.len() as f64, ok2 as f64 / dataset.len() as f64)
}

fn record(
    world: &KnowledgeWorld,
    dataset: &[IcSequence],
    theta: &[f64],
    omega: &[f64],
    temperature: f64,
    iteration: usize,
    stage: u8,
) -> Result<TraceRecord> {
    let v = softmax(theta);
    let q = softmax(omega);
    let loss = loss_partial(world, dataset, theta, omega, temperature)?;
    let (acc1, acc2) = trace_accuracy(world, dataset, &v, &q);
    Ok(TraceRecord {
        iteration,
        stage,
        l1: loss.l1,
        l2: loss.l2,
        psi: crate::analysis::psi(&v),
        gap: crate::analysis::pair_gap(&v),
        v,
        q,
        acc1,
        acc2,
    })
}

/// Uniform draw from the ball of the given radius: Gaussian direction
/// scaled by radius * U^(1/dim).
fn sample_ball(dim: usize, radius: f64, rng: &mut impl Rng) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = norm2(&dir).max(1e-300);
    let u: f64 = rng.gen::<f64>();
    let r = radius * u.powf(1.0 / dim as f64);
    dir.into_iter().map(|x| x * r / n).collect()
}

/// Two-stage temperature-scaled perturbed gradient descent on the
/// partial parameterization: stage 1 from (theta, omega) = 0 at eta1,
/// then a uniform ball perturbation, then stage 2 at eta2.
pub fn run_pgd(config: &TrainConfig, world: &KnowledgeWorld, dataset: &[IcSequence]) -> Result<RunTrace> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(IcError::InvalidArgs("empty dataset".into()));
    }
    let k = dataset[0].k;
    let t = config.temperature;
    let mut theta = vec![0.0; 2 * k + 2];
    let mut omega = vec![0.0; 2 * k + 3];
    let mut records = Vec::new();
    let mut iteration = 0usize;

    let stage = |theta: &mut Vec<f64>,
                     omega: &mut Vec<f64>,
                     eta: f64,
                     steps: Option<usize>,
                     stage_id: u8,
                     iteration: &mut usize,
                     records: &mut Vec<TraceRecord>|
     -> Result<usize> {
        let cap = steps.unwrap_or(config.max_stage_iters);
        let mut done = 0usize;
        while done < cap {
            let gt = grad_theta_analytic(world, dataset, theta, t);
            let go = grad_omega_analytic(world, dataset, omega, t);
            let gnorm = (dot(&gt, &gt) + dot(&go, &go)).sqrt();
            if steps.is_none() && gnorm < config.grad_tol {
                break;
            }
            for (x, g) in theta.iter_mut().zip(&gt) {
                *x -= eta * g;
            }
            for (x, g) in omega.iter_mut().zip(&go) {
                *x -= eta * g;
            }
            clamp_logits(theta);
            clamp_logits(omega);
            done += 1;
            *iteration += 1;
            if *iteration % config.record_stride == 0 {
                records.push(record(world, dataset, theta, omega, t, *iteration, stage_id)?);
            }
        }
        Ok(done)
    };

    records.push(record(world, dataset, &theta, &omega, t, 0, 1)?);
    let stage1_iters = stage(&mut theta, &mut omega, config.eta1, config.t1, 1, &mut iteration, &mut records)?;
    records.push(record(world, dataset, &theta, &omega, t, iteration, 1)?);

    let mut rng = stream_rng(config.seed, Stream::Perturbation);
    let radius = config.perturbation_radius();
    if radius > 0.0 {
        if config.theta_only_perturbation {
            let xi = sample_ball(theta.len(), radius, &mut rng);
            for (x, d) in theta.iter_mut().zip(&xi) {
                *x += d;
            }
        } else {
            let dim_t = theta.len();
            let xi = sample_ball(dim_t + omega.len(), radius, &mut rng);
            for (x, d) in theta.iter_mut().zip(&xi[..dim_t]) {
                *x += d;
            }
            for (x, d) in omega.iter_mut().zip(&xi[dim_t..]) {
                *x += d;
            }
        }
    }

    let stage2_iters = stage(&mut theta, &mut omega, config.eta2, config.t2, 2, &mut iteration, &mut records)?;
    records.push(record(world, dataset, &theta, &omega, t, iteration, 2)?);

    let final_loss = loss_partial(world, dataset, &theta, &omega, t)?;
    Ok(RunTrace {
        records,
        theta,
        omega,
        stage1_iters,
        stage2_iters,
        final_loss: Some(final_loss),
    })
}

/// Standard Adam moment buffers for one flat parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> Self {
        AdamState { m: vec![0.0; dim], v: vec![0.0; dim], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Adam over the partial (theta, omega) parameterization with the
/// analytic gradients; the few-shot fine-tuning loop.
pub fn run_adam_partial(
    config: &TrainConfig,
    world: &KnowledgeWorld,
    dataset: &[IcSequence],
) -> Result<RunTrace> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(IcError::InvalidArgs("empty dataset".into()));
    }
    let k = dataset[0].k;
    let t = config.temperature;
    let mut init = stream_rng(config.seed, Stream::Init);
    let mut draw = |dim: usize| -> Vec<f64> {
        (0..dim)
            .map(|_| config.init_std * init.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let mut theta = draw(2 * k + 2);
    let mut omega = draw(2 * k + 3);
    let mut opt_t = AdamState::new(theta.len(), config.adam_lr);
    let mut opt_o = AdamState::new(omega.len(), config.adam_lr);
    let mut records = Vec::new();
    records.push(record(world, dataset, &theta, &omega, t, 0, 1)?);
    for it in 1..=config.adam_iters {
        let gt = grad_theta_analytic(world, dataset, &theta, t);
        let go = grad_omega_analytic(world, dataset, &omega, t);
        opt_t.step(&mut theta, &gt);
        opt_o.step(&mut omega, &go);
        clamp_logits(&mut theta);
        clamp_logits(&mut omega);
        if it % config.record_stride == 0 {
            records.push(record(world, dataset, &theta, &omega, t, it, 1)?);
        }
    }
    records.push(record(world, dataset, &theta, &omega, t, config.adam_iters, 1)?);
    let final_loss = loss_partial(world, dataset, &theta, &omega, t)?;
    Ok(RunTrace {
        records,
        theta,
        omega,
        stage1_iters: config.adam_iters,
        stage2_iters: 0,
        final_loss: Some(final_loss),
    })
}

/// Full model state for the pretraining pipeline: trainable attention
/// matrix over stacked [position; token] embeddings, plus the MLP.
#[derive(Debug, Clone)]
pub struct FullModel {
    pub wkq: Mat,
    pub mlp: MlpParams,
}

/// One labelled training item for the full parameterization.
#[derive(Debug, Clone)]
pub struct FullSample {
    pub tokens: Vec<usize>,
    pub target: usize,
    /// Candidate token range [start, end) the softmax is restricted to.
    pub group: (usize, usize),
}

/// Gradients of the averaged cross-entropy for the full parameterization.
#[derive(Debug, Clone)]
pub struct FullGrads {
    pub wkq: Mat,
    pub w: Mat,
    pub v: Mat,
    pub loss: f64,
    pub correct: usize,
}

/// Exact reverse-mode pass through softmax-attention, residual,
/// positional projection, and the quadratic MLP, for a batch of samples.
/// Gradients for the MLP are skipped when `mlp.frozen`. One-hot
/// embeddings take a sparse path (2-hot stacked vectors); the rotated
/// basis falls back to dense linear algebra.
pub fn backprop_full(
    basis: &EmbeddingBasis,
    model: &FullModel,
    batch: &[FullSample],
    temperature: f64,
) -> Result<FullGrads> {
    let d = basis.d;
    let d_p = basis.d_p;
    let d_mlp = model.mlp.d_mlp;
    let one_hot = basis.mode == crate::vocab::EmbeddingMode::OneHot;
    let mut g = FullGrads {
        wkq: Mat::zeros(d_p + d, d_p + d),
        w: Mat::zeros(d_mlp, d),
        v: Mat::zeros(d_mlp, d),
        loss: 0.0,
        correct: 0,
    };
    let stacked = |token: usize, pos: usize| -> Vec<f64> {
        let mut z = vec![0.0; d_p + d];
        z[pos] = 1.0;
        z[d_p..].copy_from_slice(basis.phi(token));
        z
    };
    for sample in batch {
        let len = sample.tokens.len();
        if len > d_p {
            return Err(IcError::LengthExceeded { len, max: d_p });
        }
        let last_tok = sample.tokens[len - 1];
        // nonzero stacked coordinates of z_i in one-hot mode
        let z_coords = |i: usize| [i, d_p + sample.tokens[i]];
        let (scores, zs): (Vec<f64>, Vec<Vec<f64>>) = if one_hot {
            // key = Wkq z_last touches two columns; scores read 2 entries
            let last = z_coords(len - 1);
            let key: Vec<f64> = (0..d_p + d)
                .map(|r| model.wkq.get(r, last[0]) + model.wkq.get(r, last[1]))
                .collect();
            let scores = (0..len)
                .map(|i| {
                    let c = z_coords(i);
                    key[c[0]] + key[c[1]]
                })
                .collect();
            (scores, Vec::new())
        } else {
            let zs: Vec<Vec<f64>> = sample
                .tokens
                .iter()
                .enumerate()
                .map(|(i, &tok)| stacked(tok, i))
                .collect();
            let key = model.wkq.matvec(&zs[len - 1]);
            let scores = zs.iter().map(|z| dot(z, &key)).collect();
            (scores, zs)
        };
        let attn = softmax(&scores);
        // h as sparse (token, coefficient) terms; duplicates merged
        let mut terms: Vec<(usize, f64)> = Vec::with_capacity(len + 1);
        let push = |terms: &mut Vec<(usize, f64)>, tok: usize, c: f64| {
            if let Some(t) = terms.iter_mut().find(|t| t.0 == tok) {
                t.1 += c;
            } else {
                terms.push((tok, c));
            }
        };
        for (i, &tok) in sample.tokens.iter().enumerate() {
            push(&mut terms, tok, attn[i]);
        }
        push(&mut terms, last_tok, 1.0);

        let (start, end) = sample.group;
        let (pre, f_sel): (Vec<f64>, Vec<f64>) = if one_hot {
            let pre: Vec<f64> = (0..d_mlp)
                .map(|row| terms.iter().map(|&(tok, c)| model.mlp.w.get(row, tok) * c).sum())
                .collect();
            let mut f_sel = vec![0.0; end - start];
            for row in 0..d_mlp {
                let a = pre[row] * pre[row];
                if a != 0.0 {
                    crate::linalg::axpy(a, &model.mlp.v.row(row)[start..end], &mut f_sel);
                }
            }
            (pre, f_sel)
        } else {
            let mut h = vec![0.0; d];
            for &(tok, c) in &terms {
                crate::linalg::axpy(c, basis.phi(tok), &mut h);
            }
            let pre = model.mlp.w.matvec(&h);
            let act: Vec<f64> = pre.iter().map(|x| x * x).collect();
            let f = model.mlp.v.t_matvec(&act);
            let logits = basis.token_logits(&f);
            (pre, logits[start..end].to_vec())
        };
        let sel: Vec<f64> = f_sel.iter().map(|l| l / temperature).collect();
        let p = softmax(&sel);
        let target_local = sample.target - start;
        let lse = log_sum_exp(&sel);
        g.loss += check_finite(lse - sel[target_local], "full-model loss")?;
        let (best, _) = crate::memory::argmax_token(&sel);
        if best == target_local {
            g.correct += 1;
        }

        // backward: d loss / d selected-logit
        let dsel: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(j, pj)| (pj - if j == target_local { 1.0 } else { 0.0 }) / temperature)
            .collect();
        // df in embedding coordinates (nonzero only on the group slice
        // in one-hot mode)
        let mut df = vec![0.0; d];
        if one_hot {
            df[start..end].copy_from_slice(&dsel);
        } else {
            let mut dlogits = vec![0.0; d];
            dlogits[start..end].copy_from_slice(&dsel);
            df = basis.basis.t_matvec(&dlogits);
        }
        let (df_lo, df_hi) = if one_hot { (start, end) } else { (0, d) };
        let mut dpre = vec![0.0; d_mlp];
        for row in 0..d_mlp {
            let da = dot(&model.mlp.v.row(row)[df_lo..df_hi], &df[df_lo..df_hi]);
            dpre[row] = 2.0 * pre[row] * da;
        }
        if !model.mlp.frozen {
            for row in 0..d_mlp {
                let a = pre[row] * pre[row];
                if a != 0.0 {
                    crate::linalg::axpy(a, &df[df_lo..df_hi], &mut g.v.row_mut(row)[df_lo..df_hi]);
                }
                if one_hot {
                    for &(tok, c) in &terms {
                        g.w.row_mut(row)[tok] += dpre[row] * c;
                    }
                } else {
                    // dense h recomputation is cheap relative to the row loop
                }
            }
            if !one_hot {
                let mut h = vec![0.0; d];
                for &(tok, c) in &terms {
                    crate::linalg::axpy(c, basis.phi(tok), &mut h);
                }
                for row in 0..d_mlp {
                    crate::linalg::axpy(dpre[row], &h, g.w.row_mut(row));
                }
            }
        }
        // dattn_i = phi(t_i) . dh with dh = W^T dpre, needed only at the
        // input-token coordinates in one-hot mode
        let dattn: Vec<f64> = if one_hot {
            sample
                .tokens
                .iter()
                .map(|&tok| (0..d_mlp).map(|row| model.mlp.w.get(row, tok) * dpre[row]).sum())
                .collect()
        } else {
            let dh = model.mlp.w.t_matvec(&dpre);
            zs.iter().map(|z| dot(&z[d_p..], &dh)).collect()
        };
        let du = softmax_chain(&attn, &dattn);
        // dWkq = (sum_i du_i z_i) z_last^T
        if one_hot {
            let last = z_coords(len - 1);
            for (i, &dui) in du.iter().enumerate() {
                for r in z_coords(i) {
                    g.wkq.data[r * g.wkq.cols + last[0]] += dui;
                    g.wkq.data[r * g.wkq.cols + last[1]] += dui;
                }
            }
        } else {
            let mut dz = vec![0.0; d_p + d];
            for (i, z) in zs.iter().enumerate() {
                crate::linalg::axpy(du[i], z, &mut dz);
            }
            let z_last = &zs[len - 1];
            for r in 0..d_p + d {
                if dz[r] != 0.0 {
                    crate::linalg::axpy(dz[r], z_last, g.wkq.row_mut(r));
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    g.loss *= inv;
    for x in g
        .wkq
        .data
        .iter_mut()
        .chain(g.w.data.iter_mut())
        .chain(g.v.data.iter_mut())
    {
        *x *= inv;
    }
    Ok(g)
}

/// All triplet-completion samples (each triplet, each held-out element,
/// both input orders).
pub fn pretrain_batch(world: &KnowledgeWorld) -> Vec<FullSample> {
    let full = (0, world.vocab_size());
    let mut batch = Vec::new();
    for r in 0..world.m {
        for s in 0..world.n {
            let a = world.apply(r, s);
            let triplet = [world.subject_token(s), world.relation_token(r), world.answer_token(a)];
            for hold_out in 0..3 {
                let kept: Vec<usize> = (0..3).filter(|&i| i != hold_out).map(|i| triplet[i]).collect();
                for tokens in [vec![kept[0], kept[1]], vec![kept[1], kept[0]]] {
                    batch.push(FullSample { tokens, target: triplet[hold_out], group: full });
                }
            }
        }
    }
    batch
}

/// Both chain-of-thought samples of an IC sequence for full-mode
/// fine-tuning.
pub fn cot_batch(world: &KnowledgeWorld, dataset: &[IcSequence]) -> Vec<FullSample> {
    let rel_group = (2 * world.n, 2 * world.n + world.m);
    let ans_group = (world.n, 2 * world.n);
    let mut batch = Vec::new();
    for seq in dataset {
        batch.push(FullSample {
            tokens: seq.tokens.clone(),
            target: world.relation_token(seq.relation),
            group: rel_group,
        });
        let mut with_rel = seq.tokens.clone();
        with_rel.push(world.relation_token(seq.relation));
        batch.push(FullSample {
            tokens: with_rel,
            target: world.answer_token(seq.target_answer),
            group: ans_group,
        });
    }
    batch
}

/// Triplet-completion accuracy of a full model over all triplets and
/// hold-out directions. A relation prediction counts as correct when it
/// maps the subject to the answer (cells can hold several equivalent
/// relations), matching the memory-verification semantics.
pub fn triplet_accuracy(basis: &EmbeddingBasis, model: &FullModel, world: &KnowledgeWorld) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    let probe = |tokens: &[usize]| -> usize {
        let weights = attention_weights_full(basis, model, tokens);
        let logits = crate::model::logits_with_weights(basis, &model.mlp, tokens, &weights);
        crate::memory::argmax_token(&logits).0
    };
    for r in 0..world.m {
        for s in 0..world.n {
            let a = world.apply(r, s);
            let (ts, tr, ta) = (
                world.subject_token(s),
                world.relation_token(r),
                world.answer_token(a),
            );
            for (tokens, ok) in [
                ([ts, tr], Box::new(move |u: usize| u == ta) as Box<dyn Fn(usize) -> bool>),
                ([tr, ts], Box::new(move |u| u == ta)),
                ([ta, tr], Box::new(move |u| u == ts)),
                ([tr, ta], Box::new(move |u| u == ts)),
                ([ts, ta], Box::new(|u| u >= 2 * world.n && u < 2 * world.n + world.m && world.apply(u - 2 * world.n, s) == a)),
                ([ta, ts], Box::new(|u| u >= 2 * world.n && u < 2 * world.n + world.m && world.apply(u - 2 * world.n, s) == a)),
            ] {
                total += 1;
                if ok(probe(&tokens)) {
                    correct += 1;
                }
            }
        }
    }
    correct as f64 / total as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub triplet_accuracy: f64,
    pub pretrain_iters: usize,
    pub finetune_iters: usize,
    /// Attention weights for the step-1 (length 2k+2) input.
    pub v: Vec<f64>,
    /// Attention weights for the step-2 (length 2k+3) input.
    pub q: Vec<f64>,
    pub final_loss: f64,
}

/// Pretrain the full attention + MLP on triplet completion at unit
/// temperature, then freeze the MLP and fine-tune the whole attention
/// matrix on the chain-of-thought loss.
pub fn run_pretrain_pipeline(
    config: &TrainConfig,
    world: &KnowledgeWorld,
    basis: &EmbeddingBasis,
    dataset: &[IcSequence],
    d_mlp: usize,
    max_pretrain_iters: usize,
) -> Result<(FullModel, PretrainOutcome)> {
    config.validate()?;
    let d = basis.d;
    let d_p = basis.d_p;
    let mut model = FullModel {
        wkq: Mat::zeros(d_p + d, d_p + d),
        mlp: crate::memory::init_trainable(d, d_mlp, config.seed),
    };
    let batch = pretrain_batch(world);
    let mut opt_kq = AdamState::new((d_p + d) * (d_p + d), config.adam_lr);
    let mut opt_w = AdamState::new(d_mlp * d, config.adam_lr);
    let mut opt_v = AdamState::new(d_mlp * d, config.adam_lr);
    let mut acc = 0.0;
    let mut pretrain_iters = 0;
    for it in 1..=max_pretrain_iters {
        let g = backprop_full(basis, &model, &batch, 1.0)?;
        pretrain_iters = it;
        if it % 25 == 0 || it == max_pretrain_iters {
            acc = triplet_accuracy(basis, &model, world);
            if acc >= 0.99 {
                break;
            }
        }
        opt_kq.step(&mut model.wkq.data, &g.wkq.data);
        opt_w.step(&mut model.mlp.w.data, &g.w.data);
        opt_v.step(&mut model.mlp.v.data, &g.v.data);
    }
    let triplet_acc = acc;

    model.mlp.frozen = true;
    let cot = cot_batch(world, dataset);
    let mut opt_ft = AdamState::new((d_p + d) * (d_p + d), config.adam_lr);
    let mut final_loss = f64::NAN;
    // Constant lr for the first two thirds, then a cosine tail so the
    // reported weights are a settled point rather than an Adam oscillation.
    let tail_start = config.adam_iters * 2 / 3;
    for it in 0..config.adam_iters {
        if it >= tail_start && config.adam_iters > tail_start {
            let frac = (it - tail_start) as f64 / (config.adam_iters - tail_start) as f64;
            opt_ft.lr = config.adam_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        let g = backprop_full(basis, &model, &cot, config.temperature)?;
        final_loss = g.loss;
        opt_ft.step(&mut model.wkq.data, &g.wkq.data);
    }

    let k = dataset[0].k;
    let v = attention_weights_full(basis, &model, &dataset[0].tokens);
    let mut with_rel = dataset[0].tokens.clone();
    with_rel.push(world.relation_token(dataset[0].relation));
    let q = attention_weights_full(basis, &model, &with_rel);
    debug_assert_eq!(v.len(), 2 * k + 2);
    Ok((
        model,
        PretrainOutcome {
            triplet_accuracy: triplet_acc,
            pretrain_iters,
            finetune_iters: config.adam_iters,
            v,
            q,
            final_loss,
        },
    ))
}

/// Attention weights of the full model from the last position.
pub fn attention_weights_full(basis: &EmbeddingBasis, model: &FullModel, tokens: &[usize]) -> Vec<f64> {
    let d_p = basis.d_p;
    let len = tokens.len();
    let mut z_last = vec![0.0; d_p + basis.d];
    z_last[len - 1] = 1.0;
    z_last[d_p..].copy_from_slice(basis.phi(tokens[len - 1]));
    let key = model.wkq.matvec(&z_last);
    let scores: Vec<f64> = (0..len)
        .map(|i| key[i] + dot(basis.phi(tokens[i]), &key[d_p..]))
        .collect();
    softmax(&scores)
}
