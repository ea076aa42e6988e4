//! Finite-difference gradient checking.
//!
//! Always run in `f64`: float32 central differences drown in rounding noise
//! long before they reach the tolerances asserted by the test suite.

use super::tape::{NodeId, Tape};
use super::Tensor;

/// Central-difference gradient of a scalar-valued function at `x`.
pub fn finite_diff<F>(mut f: F, x: &Tensor<f64>, step: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    assert!(step > 0.0, "finite_diff: step must be positive");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - step;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, 1e-8)`.
pub fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_err: shape mismatch");
    let mut worst = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let denom = x.abs().max(y.abs()).max(1e-8);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

/// Compare the tape gradient of `build` (a scalar expression of one leaf)
/// against central differences; returns the max relative error.
pub fn grad_check<F>(build: F, x: &Tensor<f64>, step: f64) -> f64
where
    F: Fn(&mut Tape<f64>, NodeId) -> NodeId,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = build(&mut tape, leaf);
    tape.backward(loss).expect("grad_check: backward failed");
    let analytic = tape.grad_or_zeros(leaf);

    let numeric = finite_diff(
        |probe| {
            let mut t = Tape::new();
            let leaf = t.leaf(probe.clone());
            let loss = build(&mut t, leaf);
            t.value(loss).item()
        },
        x,
        step,
    );
    max_rel_err(&analytic, &numeric)
}
