use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Deep-image-prior denoising with uncertainty estimates.
#[derive(Debug, Parser)]
#[command(name = "dipuq", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Master seed; seed i of a multi-seed run uses SEED + i.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Number of independent runs.
    #[arg(long, global = true)]
    pub seeds: Option<usize>,

    /// Output file (phantom, prepare, corrupt) or directory (denoise, calibrate).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,

    /// Leave wall-clock columns empty so reruns produce identical files.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// JSON experiment file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic test image.
    Phantom(PhantomArgs),
    /// Halve an image by 2x2 block averaging to make a ground truth.
    Prepare(PrepareArgs),
    /// Add simulated noise to a ground-truth image.
    Corrupt(CorruptArgs),
    /// Fit a generator to a noisy image and write reconstructions, traces
    /// and uncertainty maps.
    Denoise(Box<DenoiseArgs>),
    /// Compute a calibration table for a finished run.
    Calibrate(CalibrateArgs),
    /// Check every autodiff primitive against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Bits {
    #[value(name = "8")]
    Eight,
    #[value(name = "16")]
    Sixteen,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// flat, gradient, shepp_like or layers.
    #[arg(long, default_value = "layers")]
    pub kind: String,

    /// Side length of a square phantom.
    #[arg(long, default_value_t = 64)]
    pub size: usize,

    #[arg(long)]
    pub width: Option<usize>,

    #[arg(long)]
    pub height: Option<usize>,

    #[arg(long, value_enum, default_value = "8")]
    pub bits: Bits,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    pub input: PathBuf,

    #[arg(long, value_enum, default_value = "8")]
    pub bits: Bits,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    pub input: PathBuf,

    /// gaussian or poisson_approx.
    #[arg(long)]
    pub kind: Option<String>,

    /// Gaussian standard deviation.
    #[arg(long)]
    pub sigma: Option<f64>,

    /// Photon count at intensity 1 for the Poisson approximation.
    #[arg(long)]
    pub peak: Option<f64>,

    /// Do not clip noisy values to [0, 1].
    #[arg(long)]
    pub no_clip: bool,

    #[arg(long, value_enum, default_value = "8")]
    pub bits: Bits,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    /// Noisy image; omit to corrupt a phantom described in the config.
    pub noisy: Option<PathBuf>,

    /// Ground truth for PSNR/SSIM traces and calibration.
    #[arg(long)]
    pub gt: Option<PathBuf>,

    /// dip, mcdip, sgld, sgld_nll or sgld_lr.
    #[arg(long)]
    pub method: Option<String>,

    #[arg(long)]
    pub iterations: Option<usize>,

    /// MC dropout samples / retained posterior snapshots.
    #[arg(long)]
    pub mc_samples: Option<usize>,

    #[arg(long)]
    pub trace_every: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub dropout: Option<f64>,

    #[arg(long)]
    pub weight_decay: Option<f64>,

    #[arg(long)]
    pub burn_in: Option<usize>,

    /// Calibration bins.
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Directory holding predictive.json from a denoise run.
    pub recon_dir: PathBuf,

    /// Ground-truth image.
    pub gt: PathBuf,

    #[arg(long, default_value_t = dipuq_core::metrics::DEFAULT_BINS)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Multiply analytic gradients by this factor before comparing.
    #[arg(long, hide = true, default_value_t = 1.0)]
    pub perturb_analytic: f64,
}
