//! Train the attention scores on a mid-size world and export the final
//! attention pattern as a CSV + SVG heatmap.
//!
//! The expected picture: the step-1 row puts its mass on the in-context
//! answer tokens (positions 2 and 4), the step-2 row on the final
//! subject and the appended relation token.

use ic_recall::analysis::export_attention_heatmap;
use ic_recall::linalg::softmax;
use ic_recall::rng::{stream_rng, Stream};
use ic_recall::training::{run_adam_partial, Optimizer, TrainConfig};
use ic_recall::vocab::{build_world_unconstrained, sample_ic_sequence, IcSequence};
use std::path::Path;

fn main() {
    let world = build_world_unconstrained(8, 64, 0).unwrap();
    let mut rng = stream_rng(0, Stream::Dataset);
    let dataset: Vec<IcSequence> =
        (0..256).map(|_| sample_ic_sequence(&world, 2, &mut rng).unwrap()).collect();

    let mut cfg = TrainConfig::equal_steps(0.05);
    cfg.optimizer = Optimizer::Adam;
    cfg.adam_iters = 4000;
    let trace = run_adam_partial(&cfg, &world, &dataset).unwrap();

    let v = softmax(&trace.theta);
    let q = softmax(&trace.omega);
    println!("v = {v:?}");
    println!("q = {q:?}");

    let out = std::env::var_os(ic_recall::config::OUT_ENV)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| Path::new("out").to_path_buf());
    std::fs::create_dir_all(&out).unwrap();
    let csv = out.join("attention.csv");
    let svg = out.join("attention.svg");
    export_attention_heatmap(&v, &q, &csv, &svg).unwrap();
    println!("wrote {} and {}", csv.display(), svg.display());
}
