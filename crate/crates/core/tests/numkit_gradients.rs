//! Every tape primitive against central finite differences, 100 random
//! trials each with a fixed seed.

mod common;

use common::{OpCase, BINARY, LAST_AXIS, MATRIX, ROWS, TOL, UNARY};
use mmkg::numkit::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 100;

fn run_all(cases: &[OpCase]) {
    for c in cases {
        let worst = common::op_worst(c, TRIALS);
        assert!(worst < TOL, "{}: max relative error {worst:e}", c.name);
    }
}

#[test]
fn elementwise_unary() {
    run_all(UNARY);
}

#[test]
fn elementwise_binary_and_broadcast() {
    run_all(BINARY);
}

#[test]
fn matrix_ops() {
    run_all(MATRIX);
}

#[test]
fn last_axis_ops() {
    run_all(LAST_AXIS);
}

#[test]
fn row_and_reduction_ops() {
    run_all(ROWS);
}

#[test]
fn softmax_cross_entropy_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let targets = [1usize, 4, 0, 2];
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone());
    let ls = tape.log_softmax_last(x).unwrap();
    let picked = tape.pick_last(ls, &targets).unwrap();
    let mean = tape.mean_all(picked).unwrap();
    let loss = tape.scale(mean, -1.0);
    let analytic = tape.backward(loss).unwrap().get(x);

    let ce = |l: &Tensor| -> f64 {
        (0..4)
            .map(|r| {
                let row = l.row(r);
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[targets[r]]
            })
            .sum::<f64>()
            / 4.0
    };
    let h = 1e-6;
    for i in 0..20 {
        let mut p = logits.clone();
        p.data_mut()[i] += h;
        let mut m = logits.clone();
        m.data_mut()[i] -= h;
        let numeric = (ce(&p) - ce(&m)) / (2.0 * h);
        let a = analytic.data()[i];
        assert!((a - numeric).abs() <= 1e-5 * numeric.abs().max(1e-3), "{i}: {a} vs {numeric}");
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let x = Tensor::randn(&[6, 7], 5.0, &mut rng);
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = t.softmax_last(v).unwrap();
        let y = t.value(y);
        for r in 0..y.rows() {
            assert!(y.row(r).iter().all(|&p| p >= 0.0));
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let scale = rng.random_range(0.5..20.0);
        let x = Tensor::randn(&[5, 16], scale, &mut rng);
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = t.layer_norm_last(v, 1e-5).unwrap();
        let y = t.value(y);
        for r in 0..y.rows() {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            // var = s2 / (s2 + eps) with s2 >= (0.5)^2 * O(1)
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }
}
