//! Gradient checking against central finite differences.
//!
//! The oracle only ever calls the forward function, so it stays independent
//! of the backward rules it is used to verify.

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Componentwise relative error on the scale `max(|a|, |n|, floor)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Default scale floor used throughout the test suites.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;
