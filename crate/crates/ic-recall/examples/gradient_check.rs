//! Cross-check the analytic attention-score gradients against central
//! finite differences at random points, and print the exact values at
//! the zero initialization.

use ic_recall::rng::{stream_rng, Stream};
use ic_recall::training::{grad_numeric, grad_omega_analytic, grad_theta_analytic, loss_partial};
use ic_recall::vocab::{build_world, enumerate_sequences};
use rand::Rng;

fn main() {
    let world = build_world(3, 6, 0, 1_000_000).unwrap();
    let dataset = enumerate_sequences(&world, 2).unwrap();
    let temperature = 0.05;

    // at theta = 0 the step-1 gradient has a closed form
    let g0 = grad_theta_analytic(&world, &dataset, &[0.0; 6], temperature);
    println!("grad L1 at zero: {g0:?}");
    println!("expected dv1 = -1/(9T) = {:.6}", -1.0 / (9.0 * temperature));
    println!("expected dv5 =  2/(9T) = {:.6}", 2.0 / (9.0 * temperature));

    let mut rng = stream_rng(42, Stream::Init);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let theta: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let omega: Vec<f64> = (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gt = grad_theta_analytic(&world, &dataset, &theta, temperature);
        let go = grad_omega_analytic(&world, &dataset, &omega, temperature);
        let nt = grad_numeric(
            |x| loss_partial(&world, &dataset, x, &omega, temperature).unwrap().l1,
            &theta,
            1e-5,
        );
        let no = grad_numeric(
            |x| loss_partial(&world, &dataset, &theta, x, temperature).unwrap().l2,
            &omega,
            1e-5,
        );
        let rel = |a: &[f64], b: &[f64]| -> f64 {
            let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
            num / den
        };
        let e = rel(&gt, &nt).max(rel(&go, &no));
        worst = worst.max(e);
        if trial < 3 {
            let loss = loss_partial(&world, &dataset, &theta, &omega, temperature).unwrap();
            println!(
                "trial {trial}: L1={:.4} L2={:.4} rel err {:.2e}",
                loss.l1, loss.l2, e
            );
        }
    }
    println!("worst relative error over 20 random points: {worst:.2e}");
    assert!(worst < 1e-5);
}
