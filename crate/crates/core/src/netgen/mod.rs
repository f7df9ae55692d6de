//! Hourglass image generator with skip connections and a two-channel head.
//!
//! The generator maps a fixed code `z` of shape `[input_channels, H, W]` to
//! an image estimate `x_hat` in (0, 1) and, with two heads, a per-pixel
//! `-log σ²` map. Every encoder and decoder block ends in dropout so the same
//! network serves plain fitting (dropout off) and Monte-Carlo sampling.

mod checkpoint;
mod code;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DropoutMode, Graph, Scalar, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use code::{sample_input_code, InputCode};

/// Range the log-variance head is clamped to before exponentiation.
pub const NEG_LOG_VAR_BOUND: f64 = 10.0;

fn default_slope() -> f64 {
    0.2
}

fn default_norm_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub depth: usize,
    pub channels: Vec<usize>,
    pub skip_channels: Vec<usize>,
    pub kernel_size: usize,
    pub dropout_p: f64,
    pub input_channels: usize,
    pub output_heads: usize,
    pub seed: u64,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            channels: vec![16, 32, 64],
            skip_channels: vec![4, 4, 4],
            kernel_size: 3,
            dropout_p: 0.3,
            input_channels: 8,
            output_heads: 2,
            seed: 0,
            leaky_slope: default_slope(),
            norm_eps: default_norm_eps(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.depth == 0 {
            return bad("generator depth must be >= 1".into());
        }
        if self.channels.len() != self.depth || self.skip_channels.len() != self.depth {
            return bad(format!(
                "depth {} needs {} channel and skip widths, got {} and {}",
                self.depth,
                self.depth,
                self.channels.len(),
                self.skip_channels.len()
            ));
        }
        if self.channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        if !(1..=2).contains(&self.output_heads) {
            return bad(format!("output_heads must be 1 or 2, got {}", self.output_heads));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) || self.norm_eps <= 0.0 {
            return bad("leaky_slope must be in [0, 1) and norm_eps positive".into());
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this factor.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    fn decoder_input(&self, level: usize) -> usize {
        let up = if level + 1 == self.depth {
            self.channels[level]
        } else {
            self.channels[level + 1]
        };
        up + self.skip_channels[level]
    }

    fn encoder_input(&self, level: usize) -> usize {
        if level == 0 {
            self.input_channels
        } else {
            self.channels[level - 1]
        }
    }
}

/// How dropout behaves during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    McSample,
    Deterministic,
}

impl ForwardMode {
    fn dropout(self) -> DropoutMode {
        match self {
            ForwardMode::Train | ForwardMode::McSample => DropoutMode::Train,
            ForwardMode::Deterministic => DropoutMode::Eval,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct NormConv {
    kernel: usize,
    gain: usize,
    shift: usize,
}

#[derive(Debug, Clone, Copy)]
struct Level {
    down: NormConv,
    skip: Option<NormConv>,
    up: NormConv,
}

#[derive(Debug, Clone)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Parameters plus the layer layout that consumes them.
#[derive(Debug, Clone)]
pub struct GeneratorNet<T = f32> {
    config: GeneratorConfig,
    params: Vec<NamedTensor<T>>,
    levels: Vec<Level>,
    head_kernel: usize,
    head_bias: usize,
}

/// Output handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorOutput {
    pub x_hat: Var,
    pub neg_log_var: Option<Var>,
}

struct Builder<T> {
    rng: ChaCha8Rng,
    slope: f64,
    params: Vec<NamedTensor<T>>,
}

impl<T: Scalar> Builder<T> {
    fn add(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.params.push(NamedTensor { name, tensor });
        self.params.len() - 1
    }

    fn kaiming(&mut self, name: String, cout: usize, cin: usize, k: usize) -> usize {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / ((1.0 + self.slope * self.slope) * fan_in)).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..cout * cin * k * k)
            .map(|_| T::of(normal.sample(&mut self.rng)))
            .collect();
        let t = Tensor::new([cout, cin, k, k], data).expect("shape matches");
        self.add(name, t)
    }

    fn norm_conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize) -> NormConv {
        NormConv {
            kernel: self.kaiming(format!("{prefix}.kernel"), cout, cin, k),
            gain: self.add(format!("{prefix}.gain"), Tensor::full([cout], T::one())),
            shift: self.add(format!("{prefix}.shift"), Tensor::zeros([cout])),
        }
    }
}

/// Builds a generator whose parameters are a pure function of `cfg`.
pub fn build_generator<T: Scalar>(cfg: &GeneratorConfig) -> Result<GeneratorNet<T>> {
    cfg.validate()?;
    let k = cfg.kernel_size;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        slope: cfg.leaky_slope,
        params: Vec::new(),
    };
    let mut levels = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let cin = cfg.encoder_input(i);
        let down = b.norm_conv(&format!("down{i}"), cfg.channels[i], cin, k);
        let skip = (cfg.skip_channels[i] > 0)
            .then(|| b.norm_conv(&format!("skip{i}"), cfg.skip_channels[i], cin, 1));
        let up = b.norm_conv(&format!("up{i}"), cfg.channels[i], cfg.decoder_input(i), k);
        levels.push(Level { down, skip, up });
    }
    let head_kernel = b.kaiming("head.kernel".into(), cfg.output_heads, cfg.channels[0], 1);
    let head_bias = b.add("head.bias".into(), Tensor::zeros([cfg.output_heads]));
    Ok(GeneratorNet {
        config: cfg.clone(),
        params: b.params,
        levels,
        head_kernel,
        head_bias,
    })
}

impl<T: Scalar> GeneratorNet<T> {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.params.iter().map(|p| &p.tensor)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|p| &mut p.tensor)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> GeneratorNet<U> {
        GeneratorNet {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            levels: self.levels.clone(),
            head_kernel: self.head_kernel,
            head_bias: self.head_bias,
        }
    }

    /// Replaces all parameter values; names and shapes must match.
    pub fn set_params(&mut self, params: Vec<NamedTensor<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "set_params",
                format!("expected {} tensors, got {}", self.params.len(), params.len()),
            ));
        }
        for (old, new) in self.params.iter().zip(&params) {
            if old.name != new.name || old.tensor.shape() != new.tensor.shape() {
                return Err(Error::shape(
                    "set_params",
                    format!(
                        "expected {} {:?}, got {} {:?}",
                        old.name,
                        old.tensor.shape(),
                        new.name,
                        new.tensor.shape()
                    ),
                ));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Records every parameter on `graph`, in parameter order.
    pub fn register(&self, graph: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    graph.param(p.tensor.clone())
                } else {
                    graph.constant(p.tensor.clone())
                }
            })
            .collect()
    }

    fn norm_conv<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        block: NormConv,
        x: Var,
        stride: usize,
        mode: ForwardMode,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let cout = g.value(vars[block.kernel]).shape()[0];
        let k = g.value(vars[block.kernel]).shape()[2];
        // Bias would be cancelled by the normalisation that follows.
        let zero_bias = g.constant(Tensor::zeros([cout]));
        let y = g.conv2d(x, vars[block.kernel], zero_bias, stride, (k - 1) / 2)?;
        let y = g.instance_norm(y, vars[block.gain], vars[block.shift], self.config.norm_eps)?;
        let y = g.leaky_relu(y, self.config.leaky_slope)?;
        match rng {
            Some(rng) => g.dropout(y, self.config.dropout_p, mode.dropout(), rng),
            None => Ok(y),
        }
    }

    fn check_code(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.spatial_multiple();
        match *shape {
            [c, h, w] if c == self.config.input_channels => {
                if h % m != 0 || w % m != 0 || h < m || w < m {
                    return Err(Error::shape(
                        "generator",
                        format!("code extent {h}x{w} must be a positive multiple of {m}"),
                    ));
                }
                Ok(())
            }
            _ => Err(Error::shape(
                "generator",
                format!(
                    "code must be [{}, H, W], got {shape:?}",
                    self.config.input_channels
                ),
            )),
        }
    }

    /// Records a forward pass on `graph` using parameter handles from
    /// [`register`](Self::register).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        z: Var,
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<GeneratorOutput> {
        self.check_code(g.value(z).shape())?;
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut x = z;
        for level in &self.levels {
            let skip = match level.skip {
                Some(block) => Some(self.norm_conv::<R>(g, vars, block, x, 1, mode, None)?),
                None => None,
            };
            skips.push(skip);
            x = self.norm_conv(g, vars, level.down, x, 2, mode, Some(&mut *rng))?;
        }
        for (level, skip) in self.levels.iter().zip(skips).rev() {
            x = g.upsample_bilinear(x, 2)?;
            if let Some(s) = skip {
                x = g.concat(&[x, s])?;
            }
            x = self.norm_conv(g, vars, level.up, x, 1, mode, Some(&mut *rng))?;
        }
        let head = g.conv2d(x, vars[self.head_kernel], vars[self.head_bias], 1, 0)?;
        let mean_head = g.narrow(head, 0, 1)?;
        let x_hat = g.sigmoid(mean_head);
        let neg_log_var = if self.config.output_heads == 2 {
            let raw = g.narrow(head, 1, 1)?;
            Some(g.clamp(raw, -NEG_LOG_VAR_BOUND, NEG_LOG_VAR_BOUND))
        } else {
            None
        };
        Ok(GeneratorOutput { x_hat, neg_log_var })
    }

    /// Forward pass without gradient bookkeeping for parameters.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        z: &Tensor<T>,
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let z = g.constant(z.clone());
        let out = self.forward(&mut g, &vars, z, mode, rng)?;
        let x_hat = g.value(out.x_hat).clone();
        let nlv = out.neg_log_var.map(|v| g.value(v).clone());
        Ok((x_hat, nlv))
    }
}
