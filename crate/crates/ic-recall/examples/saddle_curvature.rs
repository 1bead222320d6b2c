//! Probe the curvature of the first-step loss at the stage-1 saddle.
//!
//! Along the direction that transfers attention mass from the mismatched
//! answer slots to the matched ones the second derivative is strongly
//! negative (scaling like -1/(16T)); along the opposite pairing it is
//! positive. This is the strict-saddle structure the perturbation step
//! exploits.

use ic_recall::analysis::{escape_direction, hessian_probe};
use ic_recall::vocab::{build_world, enumerate_sequences};

fn main() {
    let world = build_world(3, 6, 0, 1_000_000).unwrap();
    let dataset = enumerate_sequences(&world, 2).unwrap();
    // attention logits whose softmax is the saddle point (1/4,1/4,1/4,1/4,0,0)
    let saddle_logits = {
        let p = 0.25f64;
        let eps = 1e-9f64; // keep the last two coordinates representable
        [p.ln(), p.ln(), p.ln(), p.ln(), eps.ln(), eps.ln()]
    };

    for temperature in [0.02, 0.05] {
        let escape = escape_direction();
        let opposite = [0.5, -0.5, -0.5, 0.5, 0.0, 0.0];
        let f_escape = hessian_probe(&world, &dataset, &saddle_logits, temperature, &escape).unwrap();
        let f_opp = hessian_probe(&world, &dataset, &saddle_logits, temperature, &opposite).unwrap();
        println!("T = {temperature}");
        println!("  f''(0) along escape pairing   = {f_escape:10.3}  (vs -1/(16T) = {:.3})", -1.0 / (16.0 * temperature));
        println!("  f''(0) along opposite pairing = {f_opp:10.3}");
        assert!(f_escape < -1.0 / (16.0 * temperature));
        assert!(f_opp > 0.0);
    }
}
