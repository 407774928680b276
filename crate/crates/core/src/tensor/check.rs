use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result};

/// Central-difference gradient of a scalar function, one coordinate at a
/// time: `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
///
/// This is the reference the tape's [`backward`](super::Tape::backward) is
/// checked against, so it deliberately shares no code with it.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 || h.is_nan() {
        return Err(Error::InvalidConfig(alloc::format!(
            "step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let original = x.data()[i];
        probe.data_mut()[i] = original + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = original - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = original;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}
