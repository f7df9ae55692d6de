//! Adam with decoupled weight decay, Adam-preconditioned SGLD and the
//! exponential step-size decay used by the annealed SGLD variant.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgen::NamedTensor;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay λ; corresponds to a N(0, λ⁻¹I) prior on the weights.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Per-parameter first/second moments and the step counter.
#[derive(Debug, Clone)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }
}

impl<T> AsRef<Tensor<T>> for NamedTensor<T> {
    fn as_ref(&self) -> &Tensor<T> {
        &self.tensor
    }
}

impl<T> AsMut<Tensor<T>> for NamedTensor<T> {
    fn as_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tensor
    }
}

impl<T> AsMut<Tensor<T>> for Tensor<T> {
    fn as_mut(&mut self) -> &mut Tensor<T> {
        self
    }
}

/// Gaussian noise injected after the preconditioned step.
pub struct Langevin<'a, R: Rng + ?Sized> {
    pub std: f64,
    pub rng: &'a mut R,
}

fn check<T: Scalar, P: AsMut<Tensor<T>>>(
    params: &mut [P],
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "optimizer",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let p = p.as_mut();
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "optimizer",
                format!(
                    "parameter #{i} has shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                ),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter #{i}")));
        }
    }
    if state.first.is_empty() {
        state.first = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        state.second = state.first.clone();
    } else if state.first.len() != grads.len()
        || state.first.iter().zip(grads).any(|(m, g)| m.len() != g.len())
    {
        return Err(Error::shape(
            "optimizer",
            "parameter set changed between steps".to_string(),
        ));
    }
    Ok(())
}

fn update<T: Scalar, P: AsMut<Tensor<T>>, R: Rng + ?Sized>(
    params: &mut [P],
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    lr: f64,
    mut noise: Option<Langevin<'_, R>>,
) -> Result<()> {
    check(params, grads, state)?;
    state.step += 1;
    let cfg = &state.config;
    let t = state.step as f64;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powf(t));
    let c2 = T::of(1.0 - cfg.beta2.powf(t));
    let (lr_t, eps, wd) = (T::of(lr), T::of(cfg.eps), T::of(cfg.weight_decay));
    let noise_std = noise.as_ref().map(|n| T::of(n.std));
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        let p = p.as_mut().data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            let mut next = p[i] - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
            if let (Some(std), Some(n)) = (noise_std, noise.as_mut()) {
                let z: f64 = StandardNormal.sample(&mut *n.rng);
                next += std * T::of(z);
            }
            p[i] = next;
        }
    }
    Ok(())
}

/// One Adam step with bias correction and decoupled weight decay.
pub fn adam_step<T: Scalar, P: AsMut<Tensor<T>>>(
    params: &mut [P],
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
) -> Result<()> {
    let lr = state.config.lr;
    update::<T, P, rand_chacha::ChaCha8Rng>(params, grads, state, lr, None)
}

/// Standard deviation of the noise injected by [`sgld_step`] at step size
/// `eps_t`: `noise_scale * sqrt(2 * eps_t)`.
pub fn sgld_noise_std(eps_t: f64, noise_scale: f64) -> f64 {
    noise_scale * (2.0 * eps_t).sqrt()
}

/// Adam-preconditioned Langevin step: the Adam update with step size
/// `eps_t`, followed by isotropic Gaussian noise of standard deviation
/// [`sgld_noise_std`]. A zero `noise_scale` reduces exactly to Adam.
pub fn sgld_step<T: Scalar, P: AsMut<Tensor<T>>, R: Rng + ?Sized>(
    params: &mut [P],
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    eps_t: f64,
    noise_scale: f64,
    rng: &mut R,
) -> Result<()> {
    if eps_t <= 0.0 || !eps_t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "SGLD step size must be positive, got {eps_t}"
        )));
    }
    if noise_scale < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "SGLD noise scale must be >= 0, got {noise_scale}"
        )));
    }
    let noise = (noise_scale > 0.0).then(|| Langevin {
        std: sgld_noise_std(eps_t, noise_scale),
        rng,
    });
    update(params, grads, state, eps_t, noise)
}

/// Exponential step-size decay with a floor: `max(gamma^t * eps0, floor)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub eps0: f64,
    pub gamma: f64,
    pub floor: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            eps0: 1e-2,
            gamma: 0.999,
            floor: 1e-8,
        }
    }
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || self.floor <= 0.0 || self.eps0 <= 0.0 {
            return Err(Error::Config(format!(
                "step schedule needs eps0 > 0, 0 < gamma <= 1, floor > 0; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn step_size(&self, t: u64) -> f64 {
        (self.gamma.powf(t as f64) * self.eps0).max(self.floor)
    }
}
