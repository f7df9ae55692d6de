use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Upper end of the uniform range the base code is drawn from.
pub const CODE_MAX: f64 = 0.1;

/// Fixed generator input `z0 ~ U(0, 0.1)` plus the per-iteration jitter scale.
#[derive(Debug, Clone, PartialEq)]
pub struct InputCode<T = f32> {
    pub z0: Tensor<T>,
    pub perturb_sigma: f64,
}

pub fn sample_input_code<T: Scalar, R: Rng + ?Sized>(
    height: usize,
    width: usize,
    input_channels: usize,
    perturb_sigma: f64,
    rng: &mut R,
) -> Result<InputCode<T>> {
    if perturb_sigma < 0.0 || !perturb_sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "perturbation sigma must be finite and >= 0, got {perturb_sigma}"
        )));
    }
    let data = (0..input_channels * height * width)
        .map(|_| T::of(rng.random_range(0.0..CODE_MAX)))
        .collect();
    Ok(InputCode {
        z0: Tensor::new([input_channels, height, width], data)?,
        perturb_sigma,
    })
}

impl<T: Scalar> InputCode<T> {
    /// `z0 + N(0, σ_p²)`, fresh on every call. `z0` itself never changes.
    pub fn perturb<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<T> {
        if self.perturb_sigma == 0.0 {
            return self.z0.clone();
        }
        let normal = Normal::new(0.0, self.perturb_sigma).expect("validated sigma");
        let mut z = self.z0.clone();
        z.data_mut()
            .iter_mut()
            .for_each(|v| *v += T::of(normal.sample(rng)));
        z
    }
}
