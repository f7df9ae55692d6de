//! Training methods behind a common trait, looked up by name.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::predict::{mc_predict_threaded, sgld_predict, PredictiveResult};
use super::{RunConfig, TrainedRun};
use crate::error::{Error, Result};
use crate::netgen::{ForwardMode, GeneratorConfig, GeneratorNet, InputCode};
use crate::noise::Image;
use crate::optim::{adam_step, sgld_step, OptimState, StepSchedule};
use crate::tensor::{Graph, Tensor, Var};

/// Data-fit term minimised during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean squared error to the noisy image.
    Mse,
    /// Gaussian negative log-likelihood with a learned per-pixel variance.
    Nll,
}

impl LossKind {
    pub fn heads(self) -> usize {
        match self {
            LossKind::Mse => 1,
            LossKind::Nll => 2,
        }
    }

    /// Records the loss of a forward pass against `target`.
    pub fn record(
        self,
        g: &mut Graph<f32>,
        x_hat: Var,
        neg_log_var: Option<Var>,
        target: Var,
    ) -> Result<Var> {
        match (self, neg_log_var) {
            (LossKind::Mse, _) => g.mse_loss(x_hat, target),
            (LossKind::Nll, Some(s)) => g.nll_loss(x_hat, s, target),
            (LossKind::Nll, None) => Err(Error::Config(
                "likelihood loss needs a network with a variance head".into(),
            )),
        }
    }
}

/// Reconstruction and scalar uncertainty reported on a trace row.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub x_hat: Image,
    pub u: Option<f64>,
}

/// A denoising method: its loss, update rule and predictive estimate.
pub trait Method: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn loss(&self) -> LossKind;

    /// Method-specific default configuration.
    fn default_config(&self) -> RunConfig;

    /// Applies one parameter update; `t` is the number of updates so far.
    fn update(
        &self,
        net: &mut GeneratorNet<f32>,
        grads: &[Tensor<f32>],
        state: &mut OptimState<f32>,
        cfg: &RunConfig,
        t: u64,
        rng: &mut dyn rand::RngCore,
    ) -> Result<()>;

    /// Whether posterior snapshots are collected after burn-in.
    fn keeps_snapshots(&self) -> bool {
        false
    }

    /// Whether [`Method::predict`] yields a meaningful variance.
    fn has_uncertainty(&self) -> bool;

    /// Reconstruction recorded on the trace at the current parameters.
    fn estimate(
        &self,
        net: &GeneratorNet<f32>,
        code: &InputCode<f32>,
        cfg: &RunConfig,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Estimate>;

    /// Final predictive estimate of a finished run.
    fn predict(&self, run: &TrainedRun, rng: &mut dyn rand::RngCore) -> Result<PredictiveResult>;

    fn validate(&self, cfg: &RunConfig) -> Result<()> {
        cfg.validate_common()?;
        let heads = self.loss().heads();
        if cfg.generator.output_heads != heads {
            return Err(Error::Config(format!(
                "method {} needs {heads} output head(s), config has {}",
                self.name(),
                cfg.generator.output_heads
            )));
        }
        Ok(())
    }
}

fn deterministic(net: &GeneratorNet<f32>, code: &InputCode<f32>) -> Result<(Image, Option<Image>)> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let (x, nlv) = net.predict(&code.z0, ForwardMode::Deterministic, &mut unused)?;
    let var = match nlv {
        Some(s) => Some(Image::from_tensor(&s)?.map(|v| (-v).exp())),
        None => None,
    };
    Ok((Image::from_tensor(&x)?, var))
}

fn config_for(method: &str, loss: LossKind, dropout_p: f64) -> RunConfig {
    RunConfig {
        method: method.to_string(),
        generator: GeneratorConfig {
            dropout_p,
            output_heads: loss.heads(),
            ..GeneratorConfig::default()
        },
        ..RunConfig::default()
    }
}

/// Plain deep image prior: MSE fit with Adam.
#[derive(Debug, Clone, Copy, Default)]
pub struct Dip;

impl Method for Dip {
    fn name(&self) -> &'static str {
        "dip"
    }

    fn loss(&self) -> LossKind {
        LossKind::Mse
    }

    fn default_config(&self) -> RunConfig {
        config_for(self.name(), self.loss(), 0.0)
    }

    fn update(
        &self,
        net: &mut GeneratorNet<f32>,
        grads: &[Tensor<f32>],
        state: &mut OptimState<f32>,
        _cfg: &RunConfig,
        _t: u64,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<()> {
        adam_step(net.params_mut(), grads, state)
    }

    fn has_uncertainty(&self) -> bool {
        false
    }

    fn estimate(
        &self,
        net: &GeneratorNet<f32>,
        code: &InputCode<f32>,
        _cfg: &RunConfig,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<Estimate> {
        let (x_hat, _) = deterministic(net, code)?;
        Ok(Estimate { x_hat, u: None })
    }

    fn predict(&self, run: &TrainedRun, _rng: &mut dyn rand::RngCore) -> Result<PredictiveResult> {
        let (x_hat, _) = deterministic(&run.net, &run.code)?;
        Ok(PredictiveResult::point(x_hat))
    }
}

/// Deep image prior with dropout, a variance head and the likelihood loss;
/// predictions average stochastic dropout passes.
#[derive(Debug, Clone, Copy, Default)]
pub struct McDip;

impl Method for McDip {
    fn name(&self) -> &'static str {
        "mcdip"
    }

    fn loss(&self) -> LossKind {
        LossKind::Nll
    }

    fn default_config(&self) -> RunConfig {
        let mut cfg = config_for(self.name(), self.loss(), 0.3);
        cfg.optimizer.weight_decay = 1e-6;
        cfg
    }

    fn update(
        &self,
        net: &mut GeneratorNet<f32>,
        grads: &[Tensor<f32>],
        state: &mut OptimState<f32>,
        _cfg: &RunConfig,
        _t: u64,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<()> {
        adam_step(net.params_mut(), grads, state)
    }

    fn has_uncertainty(&self) -> bool {
        true
    }

    fn estimate(
        &self,
        net: &GeneratorNet<f32>,
        code: &InputCode<f32>,
        cfg: &RunConfig,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Estimate> {
        let r = mc_predict_threaded(net, code, cfg.mc_samples, rng, cfg.threads)?;
        Ok(Estimate {
            x_hat: r.mean,
            u: Some(r.u),
        })
    }

    fn predict(&self, run: &TrainedRun, rng: &mut dyn rand::RngCore) -> Result<PredictiveResult> {
        mc_predict_threaded(
            &run.net,
            &run.code,
            run.config.mc_samples,
            rng,
            run.config.threads,
        )
    }
}

/// Adam-preconditioned Langevin dynamics with posterior averaging, in three
/// flavours: MSE loss, likelihood loss, and MSE loss with step-size decay.
#[derive(Debug, Clone, Copy)]
pub struct Sgld {
    name: &'static str,
    loss: LossKind,
    decay: bool,
}

impl Sgld {
    pub const PLAIN: Sgld = Sgld {
        name: "sgld",
        loss: LossKind::Mse,
        decay: false,
    };
    pub const NLL: Sgld = Sgld {
        name: "sgld_nll",
        loss: LossKind::Nll,
        decay: false,
    };
    pub const DECAY: Sgld = Sgld {
        name: "sgld_lr",
        loss: LossKind::Mse,
        decay: true,
    };

    fn step_size(&self, cfg: &RunConfig, t: u64) -> f64 {
        match (&cfg.schedule, self.decay) {
            (Some(s), true) => s.step_size(t),
            (None, true) => StepSchedule {
                eps0: cfg.optimizer.lr,
                ..StepSchedule::default()
            }
            .step_size(t),
            (_, false) => cfg.optimizer.lr,
        }
    }
}

impl Method for Sgld {
    fn name(&self) -> &'static str {
        self.name
    }

    fn loss(&self) -> LossKind {
        self.loss
    }

    fn default_config(&self) -> RunConfig {
        let mut cfg = config_for(self.name, self.loss, 0.0);
        if self.decay {
            cfg.schedule = Some(StepSchedule::default());
        }
        cfg
    }

    fn validate(&self, cfg: &RunConfig) -> Result<()> {
        cfg.validate_common()?;
        if cfg.generator.output_heads != self.loss.heads() {
            return Err(Error::Config(format!(
                "method {} needs {} output head(s), config has {}",
                self.name,
                self.loss.heads(),
                cfg.generator.output_heads
            )));
        }
        if cfg.burn_in() >= cfg.iterations {
            return Err(Error::Config(format!(
                "burn_in ({}) must be below the iteration budget ({})",
                cfg.burn_in(),
                cfg.iterations
            )));
        }
        Ok(())
    }

    fn update(
        &self,
        net: &mut GeneratorNet<f32>,
        grads: &[Tensor<f32>],
        state: &mut OptimState<f32>,
        cfg: &RunConfig,
        t: u64,
        rng: &mut dyn rand::RngCore,
    ) -> Result<()> {
        let eps_t = self.step_size(cfg, t);
        sgld_step(net.params_mut(), grads, state, eps_t, cfg.sgld_noise_scale, rng)
    }

    fn keeps_snapshots(&self) -> bool {
        true
    }

    fn has_uncertainty(&self) -> bool {
        true
    }

    fn estimate(
        &self,
        net: &GeneratorNet<f32>,
        code: &InputCode<f32>,
        _cfg: &RunConfig,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<Estimate> {
        let (x_hat, var) = deterministic(net, code)?;
        Ok(Estimate {
            x_hat,
            u: var.map(|v| v.mean()),
        })
    }

    fn predict(&self, run: &TrainedRun, _rng: &mut dyn rand::RngCore) -> Result<PredictiveResult> {
        sgld_predict(&run.snapshots, self.loss == LossKind::Nll)
    }
}

/// Name-indexed set of methods.
#[derive(Debug, Clone)]
pub struct MethodRegistry {
    methods: BTreeMap<&'static str, Arc<dyn Method>>,
}

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(Dip));
        r.register(Arc::new(McDip));
        r.register(Arc::new(Sgld::PLAIN));
        r.register(Arc::new(Sgld::NLL));
        r.register(Arc::new(Sgld::DECAY));
        r
    }
}

impl MethodRegistry {
    pub fn empty() -> Self {
        Self {
            methods: BTreeMap::new(),
        }
    }

    /// Adds `method`, replacing any method of the same name.
    pub fn register(&mut self, method: Arc<dyn Method>) {
        self.methods.insert(method.name(), method);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Method>> {
        self.methods.get(name).cloned().ok_or_else(|| Error::Unknown {
            kind: "method",
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lists_all_methods() {
        let r = MethodRegistry::default();
        assert_eq!(r.names(), ["dip", "mcdip", "sgld", "sgld_lr", "sgld_nll"]);
        for name in r.names() {
            let m = r.get(name).unwrap();
            let cfg = m.default_config();
            assert_eq!(cfg.method, name);
            m.validate(&cfg).unwrap();
        }
        let err = r.get("adam").unwrap_err();
        assert!(err.to_string().contains("mcdip"));
    }

    #[test]
    fn head_count_enforced() {
        let mut cfg = McDip.default_config();
        cfg.generator.output_heads = 1;
        assert!(McDip.validate(&cfg).is_err());
    }

    #[test]
    fn decay_schedule() {
        let cfg = Sgld::DECAY.default_config();
        assert_eq!(Sgld::DECAY.step_size(&cfg, 0), 1e-2);
        assert!((Sgld::DECAY.step_size(&cfg, 1) - 9.99e-3).abs() < 1e-15);
        assert_eq!(Sgld::PLAIN.step_size(&cfg, 1000), cfg.optimizer.lr);
    }

    #[test]
    fn burn_in_must_precede_budget() {
        let mut cfg = Sgld::PLAIN.default_config();
        cfg.burn_in = Some(cfg.iterations);
        assert!(Sgld::PLAIN.validate(&cfg).is_err());
    }
}
