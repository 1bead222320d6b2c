//! End-to-end pipeline: pretrain a quadratic MLP plus full attention
//! matrix on triplet completion, freeze the MLP, then fine-tune the
//! attention on the two-step recall loss and inspect the pattern.

use ic_recall::rng::{stream_rng, Stream};
use ic_recall::training::{run_pretrain_pipeline, TrainConfig};
use ic_recall::vocab::{
    build_world_unconstrained, sample_ic_sequence, EmbeddingBasis, EmbeddingMode, IcSequence,
};

fn main() {
    let world = build_world_unconstrained(8, 64, 0).unwrap();
    let basis = EmbeddingBasis::new(&world, 2, EmbeddingMode::OneHot, 0);
    let mut rng = stream_rng(1, Stream::Dataset);
    let dataset: Vec<IcSequence> =
        (0..256).map(|_| sample_ic_sequence(&world, 2, &mut rng).unwrap()).collect();

    let mut cfg = TrainConfig::equal_steps(0.05);
    cfg.adam_iters = 12_000;
    cfg.seed = 1;

    let (_, outcome) = run_pretrain_pipeline(&cfg, &world, &basis, &dataset, 192, 2000).unwrap();
    println!(
        "pretraining reached triplet accuracy {:.4} after {} iterations",
        outcome.triplet_accuracy, outcome.pretrain_iters
    );
    println!("fine-tuned {} iterations, final loss {:.6}", outcome.finetune_iters, outcome.final_loss);
    println!("step-1 attention: {:?}", outcome.v);
    println!("step-2 attention: {:?}", outcome.q);
    let v = &outcome.v;
    println!(
        "answer-slot mass pattern: |v1-v2|={:.4} |v3-v4|={:.4} cross gap |v1-v3|={:.4}",
        (v[0] - v[1]).abs(),
        (v[2] - v[3]).abs(),
        (v[0] - v[2]).abs()
    );
    println!("end-of-sequence mass in step-2 row: {:.4}", outcome.q[6]);
}
