//! Small Monte Carlo summaries with deterministic (ordered) reductions.

use crate::fields::{Vector, ZERO};

/// Sample mean and its standard error.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Componentwise [`mean_se`].
pub fn mean_se_vec(values: &[Vector]) -> (Vector, Vector) {
    let mut mean = ZERO;
    let mut se = ZERO;
    let mut column = vec![0.0; values.len()];
    for i in 0..mean.len() {
        for (c, v) in column.iter_mut().zip(values) {
            *c = v[i];
        }
        let (m, s) = mean_se(&column);
        mean[i] = m;
        se[i] = s;
    }
    (mean, se)
}

/// Root mean square of vector norms.
pub fn rms(values: &[Vector]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| crate::fields::dot(v, v)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Composite Simpson weights on `n + 1` equally spaced nodes; falls back to
/// the trapezoid rule when `n` is odd.
pub fn quadrature_weights(n: usize, h: f64) -> Vec<f64> {
    if n == 0 {
        return vec![0.0];
    }
    if n.is_multiple_of(2) {
        (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                w * h / 3.0
            })
            .collect()
    } else {
        (0..=n)
            .map(|i| if i == 0 || i == n { 0.5 * h } else { h })
            .collect()
    }
}
