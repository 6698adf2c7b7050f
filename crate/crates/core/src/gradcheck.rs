//! Central finite-difference gradient oracle.
//!
//! This is the independent reference that backward-pass implementations are
//! validated against: it only ever calls the forward closure, never the
//! tape's backward rules. Checks are meant to run in `f64`, where the
//! truncation error of the central stencil (~h^2) sits far below the 1e-6
//! acceptance threshold.

/// Default step, scaled per-coordinate by input magnitude.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Central-difference gradient of `f` at `x0`.
///
/// Coordinate `i` uses step `h * max(1, |x0[i]|)`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let hi = h * x0[i].abs().max(1.0);
        x[i] = x0[i] + hi;
        let fp = f(&x);
        x[i] = x0[i] - hi;
        let fm = f(&x);
        x[i] = x0[i];
        grad[i] = (fp - fm) / (2.0 * hi);
    }
    grad
}

/// Worst-case relative error between an analytic gradient and the
/// finite-difference oracle, normalized by the gradient's own scale.
pub fn compare(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len(), "gradient length mismatch");
    let scale = analytic
        .iter()
        .chain(reference)
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (&a, &r)| m.max((a - r).abs() / scale))
}

/// Convenience: one-call check of `analytic` against the oracle at `x0`.
pub fn rel_err_vs_fd(f: impl FnMut(&[f64]) -> f64, x0: &[f64], analytic: &[f64]) -> f64 {
    let fd = finite_diff_grad(f, x0, DEFAULT_STEP);
    compare(analytic, &fd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum(x^2)/2, grad = x.
        let x0 = [0.3, -1.7, 2.5];
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() / 2.0;
        let err = rel_err_vs_fd(f, &x0, &x0);
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x0 = [1.0, 2.0];
        let f = |x: &[f64]| x[0] * x[0] + x[1];
        let wrong = [2.0, 2.0]; // true grad is [2, 1]
        let err = rel_err_vs_fd(f, &x0, &wrong);
        assert!(err > 0.1);
    }
}
