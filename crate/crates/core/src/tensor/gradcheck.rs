use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `x`.
///
/// The divisor uses the step actually representable in `f32`, not the
/// requested `eps`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f32) -> Result<Tensor> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::invalid(format!("finite-difference eps {eps} outside [1e-5, 1e-2]")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let up = orig + eps;
        let down = orig - eps;
        probe.data_mut()[i] = up;
        let fu = f(&probe);
        probe.data_mut()[i] = down;
        let fd = f(&probe);
        probe.data_mut()[i] = orig;
        if !fu.is_finite() || !fd.is_finite() {
            return Err(Error::NonFinite(format!("function value near element {i}")));
        }
        grad.data_mut()[i] = ((fu - fd) / (up as f64 - down as f64)) as f32;
    }
    Ok(grad)
}
