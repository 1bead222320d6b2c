//! The two-stage escape in the smallest setting: 3 subjects, all 6
//! bijections as relations, population loss over all 36 sequences.
//!
//! Stage 1 converges to a saddle where the attention pairs the first
//! subject with the *wrong* answers as often as the right ones; a tiny
//! random perturbation plus stage 2 breaks the tie and drives the loss
//! below log 2.

use ic_recall::analysis::{distance_to_saddle, evaluate_partial, psi, EvalScope};
use ic_recall::linalg::softmax;
use ic_recall::training::{run_pgd, TrainConfig};
use ic_recall::vocab::{build_world, enumerate_sequences};

fn main() {
    let temperature = 0.02;
    let world = build_world(3, 6, 0, 1_000_000).unwrap();
    let dataset = enumerate_sequences(&world, 2).unwrap();
    println!("population objective over {} sequences, T={temperature}", dataset.len());

    let mut cfg = TrainConfig::equal_steps(temperature);
    // the saddle approach has a 1/t tail, so cap the stages instead of
    // waiting for the gradient norm to vanish
    cfg.t1 = Some(2_000_000);
    cfg.t2 = Some(2_000_000);
    cfg.record_stride = 200_000;

    let trace = run_pgd(&cfg, &world, &dataset).unwrap();
    for r in &trace.records {
        println!(
            "stage {} iter {:>8}: L1={:.6} L2={:.6} psi={} dist-to-saddle={:.4}",
            r.stage,
            r.iteration,
            r.l1,
            r.l2,
            r.psi.map_or("-".into(), |p| format!("{p:.4}")),
            distance_to_saddle(&r.v),
        );
    }

    let v = softmax(&trace.theta);
    let q = softmax(&trace.omega);
    println!("final v = {v:?}");
    println!("final q = {q:?}");
    println!("final psi = {:?}", psi(&v));
    println!("log 2 = {:.6}, final L1 = {:.6}", std::f64::consts::LN_2, trace.final_loss.as_ref().unwrap().l1);

    let report = evaluate_partial(&world, &trace.theta, &trace.omega, EvalScope::All).unwrap();
    println!(
        "exhaustive accuracy: step1={:.4} step2={:.4} end-to-end={:.4}",
        report.acc1, report.acc2, report.acc_end_to_end
    );
}
