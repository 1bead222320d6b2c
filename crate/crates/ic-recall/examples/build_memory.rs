//! Construct the exact associative memory for an 8-subject world and
//! check every triplet in all three leave-one-out directions.

use ic_recall::memory::{construct_memory, verify_memory};
use ic_recall::vocab::{build_affine_world, EmbeddingBasis, EmbeddingMode};

fn main() {
    let world = build_affine_world(8, 0).expect("affine world over GF(8)");
    println!("world: n={} m={} (full affine family)", world.n, world.m);

    let basis = EmbeddingBasis::new(&world, 2, EmbeddingMode::OneHot, 0);
    let mlp = construct_memory(&world, &basis);
    println!("memory: {} rows of width {}", mlp.d_mlp, mlp.d);

    let report = verify_memory(&mlp, &world, &basis);
    println!(
        "verified {} probes: {} failures, {} argmax ties",
        report.probes, report.failures, report.ties
    );
    assert_eq!(report.failures, 0);

    // the same construction under a random orthonormal basis
    let rot = EmbeddingBasis::new(&world, 2, EmbeddingMode::RandomOrthonormal, 7);
    let mlp_rot = construct_memory(&world, &rot);
    let report_rot = verify_memory(&mlp_rot, &world, &rot);
    println!(
        "rotated basis: {} probes, {} failures",
        report_rot.probes, report_rot.failures
    );
    assert_eq!(report_rot.failures, 0);
}
