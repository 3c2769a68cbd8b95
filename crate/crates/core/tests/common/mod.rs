//! Shared helpers for the integration suites: finite-difference oracles kept
//! independent of the tape's backward pass.

use lamcast_core::tape::{Tape, TensorId};
use lamcast_core::Tensor;

/// Central finite differences (h = 1e-5) of a scalar-valued builder with
/// respect to one input tensor.
pub fn fd_grad(build: impl Fn(&mut Tape<f64>, &Tensor) -> TensorId, x0: &Tensor) -> Vec<f64> {
    let h = 1e-5;
    let mut g = Vec::with_capacity(x0.numel());
    for i in 0..x0.numel() {
        let mut xp = x0.clone();
        xp.values_mut()[i] += h;
        let mut xm = x0.clone();
        xm.values_mut()[i] -= h;
        let mut tp = Tape::new();
        let fp = build(&mut tp, &xp);
        let mut tm = Tape::new();
        let fm = build(&mut tm, &xm);
        g.push((tp.value(fp).item().unwrap() - tm.value(fm).item().unwrap()) / (2.0 * h));
    }
    g
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

pub fn assert_bits_eq(a: &[f64], b: &[f64], context: &str) {
    assert_eq!(a.len(), b.len(), "{context}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert_eq!(x.to_bits(), y.to_bits(), "{context}: element {i}: {x} vs {y}");
    }
}
