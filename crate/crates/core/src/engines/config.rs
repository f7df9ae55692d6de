use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgen::GeneratorConfig;
use crate::optim::{AdamConfig, StepSchedule};

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: String,
    pub generator: GeneratorConfig,
    pub optimizer: AdamConfig,
    /// Step-size decay; used by methods that anneal the Langevin step.
    pub schedule: Option<StepSchedule>,
    /// Multiplier on the `sqrt(2 eps_t)` Langevin noise.
    pub sgld_noise_scale: f64,
    pub iterations: usize,
    /// Number of MC dropout samples, and number of retained SGLD snapshots.
    pub mc_samples: usize,
    /// Iterations discarded before SGLD snapshots are kept; half the budget
    /// when absent.
    pub burn_in: Option<usize>,
    pub snapshot_every: usize,
    pub trace_every: usize,
    /// Standard deviation of the per-iteration jitter on the input code.
    pub perturb_sigma: f64,
    /// Master seed; also seeds weight initialisation.
    pub seed: u64,
    /// Worker threads for MC sampling.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: "dip".to_string(),
            generator: GeneratorConfig {
                dropout_p: 0.0,
                output_heads: 1,
                ..GeneratorConfig::default()
            },
            optimizer: AdamConfig::default(),
            schedule: None,
            sgld_noise_scale: 0.04,
            iterations: 5000,
            mc_samples: 25,
            burn_in: None,
            snapshot_every: 100,
            trace_every: 50,
            perturb_sigma: 1.0 / 30.0,
            seed: 0,
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.iterations / 2)
    }

    /// Checks settings that do not depend on the method.
    pub fn validate_common(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iteration budget must be at least 1".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if self.trace_every == 0 || self.snapshot_every == 0 {
            return Err(Error::Config(
                "trace_every and snapshot_every must be at least 1".into(),
            ));
        }
        if !(self.sgld_noise_scale >= 0.0 && self.sgld_noise_scale.is_finite()) {
            return Err(Error::Config(format!(
                "sgld_noise_scale must be >= 0, got {}",
                self.sgld_noise_scale
            )));
        }
        if !(self.perturb_sigma >= 0.0 && self.perturb_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "perturb_sigma must be >= 0, got {}",
                self.perturb_sigma
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.generator.validate()?;
        self.optimizer.validate()?;
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        Ok(())
    }

    /// Applies a (possibly partial) JSON object on top of this config.
    /// Nested objects merge key by key.
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, overrides);
        Ok(serde_json::from_value(base)?)
    }
}

fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}
