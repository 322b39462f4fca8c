//! Central finite-difference gradient verification.

/// Central-difference gradient of `f` at `x`. `x` is restored on return.
pub fn numeric_gradient(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64, eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(x);
        x[i] = orig - eps;
        let minus = f(x);
        x[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Worst relative error between analytic and numeric gradients, with a small
/// absolute floor so dead (legitimately zero) entries do not blow up the
/// ratio. Returns an error description when either side is non-finite.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> Result<f64, String> {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_rel: f64 = 0.0;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if !a.is_finite() || !n.is_finite() {
            return Err(format!("non-finite gradient at index {i}: analytic {a}, numeric {n}"));
        }
        let denom = a.abs().max(n.abs()).max(1e-4);
        max_rel = max_rel.max((a - n).abs() / denom);
    }
    Ok(max_rel)
}
