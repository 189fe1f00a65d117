use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_difference_gradient<F>(mut f: F, at: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Oracle(format!("step must be positive, got {h}")));
    }
    let mut point = at.clone();
    let mut grad = Tensor::zeros(at.shape());
    for i in 0..at.len() {
        let x = at.data()[i];
        point.data_mut()[i] = x + h;
        let up = f(&point);
        point.data_mut()[i] = x - h;
        let down = f(&point);
        point.data_mut()[i] = x;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!("non-finite function value at coordinate {i}")));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}
