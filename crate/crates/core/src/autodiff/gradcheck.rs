//! Finite-difference verification harness.
//!
//! `fd_check` compares tape gradients against central differences for an
//! arbitrary scalar-valued graph builder. The builder is re-run on a fresh
//! tape for every probe, so it must be a pure function of its inputs.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::{Tape, Tensor};
use crate::oracles::finite_difference_grad;
use crate::rng::{rng_for, Stream};

/// Uniform draws in `[lo, hi)`.
pub fn rand_array(shape: &[usize], seed: u64, lo: f64, hi: f64) -> ArrayD<f64> {
    let mut rng = rng_for(seed, Stream::GradCheck);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(lo..hi))
}

/// Draws with magnitude in `[0.1, 1)` and random sign, keeping every element
/// away from the kinks of relu/abs/max-style ops so central differences stay
/// valid.
pub fn rand_array_margin(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = rng_for(seed, Stream::GradCheck);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let mag = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Checks the tape gradient of `build` against central finite differences
/// for every input. `build` stages the given leaves and must return a
/// single-element tensor.
pub fn fd_check(
    inputs: &[ArrayD<f64>],
    eps: f64,
    tol: f64,
    build: impl Fn(&Tape<f64>, &[Tensor<f64>]) -> Tensor<f64>,
) {
    let tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = build(&tape, &leaves);
    assert_eq!(out.value().len(), 1, "fd_check wants a scalar objective");
    tape.backward(&out);
    let analytic: Vec<ArrayD<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| ArrayD::zeros(l.value().raw_dim())))
        .collect();

    for (i, input) in inputs.iter().enumerate() {
        let numeric = finite_difference_grad(input, eps, |probe| {
            let tape = Tape::new();
            let leaves: Vec<Tensor<f64>> = inputs
                .iter()
                .enumerate()
                .map(|(j, a)| tape.leaf(if j == i { probe.clone() } else { a.clone() }))
                .collect();
            build(&tape, &leaves).scalar()
        });
        let mut worst = 0.0f64;
        for (a, f) in analytic[i].iter().zip(numeric.iter()) {
            let err = (a - f).abs() / (1.0 + a.abs().max(f.abs()));
            worst = worst.max(err);
        }
        assert!(
            worst <= tol,
            "input {i}: max relative gradient error {worst:.3e} exceeds {tol:.1e}"
        );
    }
}
