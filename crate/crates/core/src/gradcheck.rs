//! Finite-difference gradient checking.
//!
//! Central differences in f64 give roughly ten significant digits on
//! well-scaled problems, which leaves plenty of headroom under the 1e-4
//! relative tolerance the test suites pin.

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Largest elementwise relative error between two gradients.
///
/// The denominator is floored at 1e-6 so that near-zero pairs compare on an
/// absolute scale instead of blowing up.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
