//! Experiment description assembled from a JSON file and flags.

use std::path::{Path, PathBuf};

use dipuq_core::engines::{MethodRegistry, RunConfig};
use dipuq_core::noise::{NoiseSpec, PhantomKind};
use serde::{Deserialize, Serialize};

use crate::args::{Common, DenoiseArgs};
use crate::error::CliError;

pub const DEFAULT_METHOD: &str = "mcdip";
pub const THREADS_ENV: &str = "DIPUQ_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_size() -> usize {
    64
}

/// Which artifacts a denoise run writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Emit {
    pub reconstruction: bool,
    pub uncertainty: bool,
    pub trace: bool,
    pub calibration: bool,
    pub checkpoint: bool,
}

impl Default for Emit {
    fn default() -> Self {
        Self {
            reconstruction: true,
            uncertainty: true,
            trace: true,
            calibration: true,
            checkpoint: true,
        }
    }
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentFile {
    pub input: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub phantom: Option<PhantomSpec>,
    pub noise: Option<serde_json::Value>,
    pub run: Option<serde_json::Value>,
    pub seed: Option<u64>,
    pub seeds: Option<usize>,
    pub out: Option<PathBuf>,
    pub bins: Option<usize>,
    pub emit: Option<Emit>,
}

impl ExperimentFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Noise spec from the file merged over the defaults.
    pub fn noise_spec(&self) -> Result<NoiseSpec, CliError> {
        let mut base = serde_json::to_value(NoiseSpec::default())?;
        if let (Some(patch), Some(obj)) = (&self.noise, base.as_object_mut()) {
            let patch = patch
                .as_object()
                .ok_or_else(|| CliError::Usage("config `noise` must be an object".into()))?;
            for (k, v) in patch {
                obj.insert(k.clone(), v.clone());
            }
        }
        Ok(serde_json::from_value(base)?)
    }
}

/// Fully resolved denoising experiment; its JSON form is what the
/// provenance hash covers.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSpec {
    pub input: Option<PathBuf>,
    pub input_sha256: Option<String>,
    pub ground_truth: Option<PathBuf>,
    pub phantom: Option<PhantomSpec>,
    pub noise: Option<NoiseSpec>,
    pub run: RunConfig,
    pub seeds: usize,
    pub bins: usize,
    pub emit: Emit,
}

pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(1),
    }
}

/// Builds the run configuration: method defaults, then the file, then flags.
pub fn resolve_run(
    file: &ExperimentFile,
    common: &Common,
    args: &DenoiseArgs,
    registry: &MethodRegistry,
) -> Result<RunConfig, CliError> {
    let file_method = file
        .run
        .as_ref()
        .and_then(|r| r.get("method"))
        .and_then(|m| m.as_str())
        .map(str::to_string);
    let method = args
        .method
        .clone()
        .or(file_method)
        .unwrap_or_else(|| DEFAULT_METHOD.to_string());
    let defaults = registry.get(&method)?.default_config();
    let mut run = match &file.run {
        Some(patch) => defaults.with_overrides(patch)?,
        None => defaults,
    };
    run.method = method;
    if let Some(seed) = common.seed.or(file.seed) {
        run.seed = seed;
    }
    if let Some(v) = args.iterations {
        run.iterations = v;
    }
    if let Some(v) = args.mc_samples {
        run.mc_samples = v;
    }
    if let Some(v) = args.trace_every {
        run.trace_every = v;
    }
    if let Some(v) = args.lr {
        run.optimizer.lr = v;
    }
    if let Some(v) = args.dropout {
        run.generator.dropout_p = v;
    }
    if let Some(v) = args.weight_decay {
        run.optimizer.weight_decay = v;
    }
    if let Some(v) = args.burn_in {
        run.burn_in = Some(v);
    }
    run.threads = threads_from_env()?;
    registry.get(&run.method)?.validate(&run)?;
    Ok(run)
}
