//! Central finite differences.

use crate::error::{HpanError, Result};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        if !hi.is_finite() || !lo.is_finite() {
            return Err(HpanError::NonFiniteProbe { index: i });
        }
        grad.push((hi - lo) / (2.0 * step));
    }
    Ok(grad)
}

/// `max |a - n| / max(max |a|, max |n|, 1e-12)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic.iter().chain(numeric).fold(1e-12f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}
