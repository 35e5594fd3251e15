//! Central finite-difference utilities for gradient verification.

use super::Tensor;

/// Step used by the gradient checks.
pub const FD_EPS: f64 = 1e-3;

/// Central difference of `f` w.r.t. element `index` of `at`.
pub fn central_difference(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, index: usize, eps: f64) -> f64 {
    let mut plus = at.clone();
    plus.data_mut()[index] += eps;
    let mut minus = at.clone();
    minus.data_mut()[index] -= eps;
    (f(&plus) - f(&minus)) / (2.0 * eps)
}

/// Full numeric gradient of `f` at `at`.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, eps: f64) -> Tensor {
    let data = (0..at.len()).map(|i| central_difference(&mut f, at, i, eps)).collect();
    Tensor::new(at.shape().to_vec(), data).expect("same shape")
}

/// `|a - b| / max(|a|, |b|, 1e-6)`; the floor keeps round-off on vanishing
/// gradients from dominating.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, b)| relative_error(*a, *b)).fold(0.0, f64::max)
}

/// True when the central differences at `eps` and `eps / 2` agree, i.e. no
/// kink of a piecewise-linear op lies within the probe interval.
pub fn is_smooth_probe(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, index: usize, eps: f64) -> bool {
    let d1 = central_difference(&mut f, at, index, eps);
    let d2 = central_difference(&mut f, at, index, eps / 2.0);
    relative_error(d1, d2) < 1e-5
}
