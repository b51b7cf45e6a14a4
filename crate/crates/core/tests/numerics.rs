//! Finite-difference gradient checks for every differentiable op, and the
//! convolution against a direct loop implementation.

mod gradcheck;

use gradcheck::{composite_errors, conv_oracle_errors, op_cases, worst_over_seeds, CONV_TOL, TOL};
use lpal_core::numerics::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_central_differences() {
    for case in op_cases() {
        let (seed, err) = worst_over_seeds(&case);
        assert!(err < TOL, "{} seed {seed}: relative error {err:e}", case.name);
    }
}

#[test]
fn composite_network_gradient() {
    for (seed, err) in composite_errors() {
        assert!(err < TOL, "small network seed {seed}: relative error {err:e}");
    }
}

#[test]
fn conv_matches_direct_loops() {
    for (case, err) in conv_oracle_errors() {
        assert!(err < CONV_TOL, "{case}: {err:e}");
    }
}

#[test]
fn softmax_rows_sum_to_one_and_ce_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let logits: Vec<f32> = (0..3).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let target = rng.gen_range(0..3);
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(Tensor::new([1, 3], logits.clone()).unwrap());
        let ce = tape.softmax_cross_entropy(l, &[target]).unwrap();
        let loss = tape.value(ce).item().unwrap();
        assert!(loss >= 0.0 && loss.is_finite());
        let max = logits.iter().cloned().fold(f32::MIN, f32::max) as f64;
        let z: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
        let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp() / z).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}
