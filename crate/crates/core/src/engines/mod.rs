//! Training loops, posterior prediction and run traces.

mod config;
mod methods;
mod predict;
mod trace;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{mse, psnr, ssim, SSIM_WINDOW};
use crate::netgen::{build_generator, sample_input_code, ForwardMode, GeneratorNet, InputCode};
use crate::noise::Image;
use crate::optim::OptimState;
use crate::tensor::{Graph, Tensor};

pub use config::RunConfig;
pub use methods::{Dip, Estimate, LossKind, McDip, Method, MethodRegistry, Sgld};
pub use predict::{
    mc_predict, mc_predict_threaded, oracle_early_stop, sgld_predict, PredictiveResult, Snapshot,
    TraceKey,
};
pub use trace::{read_trace_csv, write_trace_csv, TraceRow, TRACE_HEADER};

/// Independent random streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Code = 1,
    Perturb = 2,
    Dropout = 3,
    Langevin = 4,
    Estimate = 5,
    Predict = 6,
}

/// Random stream `which` of master `seed`.
pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub config: RunConfig,
    pub net: GeneratorNet<f32>,
    pub code: InputCode<f32>,
    pub trace: Vec<TraceRow>,
    /// Most recent posterior samples, oldest first (Langevin methods only).
    pub snapshots: Vec<Snapshot>,
}

impl TrainedRun {
    pub fn final_row(&self) -> &TraceRow {
        self.trace.last().expect("training records at least one row")
    }
}

/// Fits a generator to `noisy` with the method named in `cfg`, using the
/// default method set.
pub fn train(noisy: &Image, cfg: &RunConfig, gt: Option<&Image>) -> Result<TrainedRun> {
    let method = MethodRegistry::default().get(&cfg.method)?;
    train_with(method.as_ref(), noisy, cfg, gt, |_| {})
}

/// Fits a generator with an explicit `method`, calling `observe` on every
/// trace row as it is recorded.
pub fn train_with(
    method: &dyn Method,
    noisy: &Image,
    cfg: &RunConfig,
    gt: Option<&Image>,
    mut observe: impl FnMut(&TraceRow),
) -> Result<TrainedRun> {
    method.validate(cfg)?;
    if let Some(gt) = gt {
        if !gt.same_shape(noisy) {
            return Err(Error::shape(
                "train",
                format!(
                    "ground truth is {}x{}, noisy image {}x{}",
                    gt.width(),
                    gt.height(),
                    noisy.width(),
                    noisy.height()
                ),
            ));
        }
    }
    let m = cfg.generator.spatial_multiple();
    if !noisy.width().is_multiple_of(m) || !noisy.height().is_multiple_of(m) {
        return Err(Error::InvalidArgument(format!(
            "image size {}x{} must be a multiple of {m} for depth {}",
            noisy.width(),
            noisy.height(),
            cfg.generator.depth
        )));
    }

    let mut gen_cfg = cfg.generator.clone();
    gen_cfg.seed = cfg.seed;
    let mut net = build_generator::<f32>(&gen_cfg)?;
    let code = sample_input_code::<f32, _>(
        noisy.height(),
        noisy.width(),
        gen_cfg.input_channels,
        cfg.perturb_sigma,
        &mut stream(cfg.seed, Stream::Code),
    )?;
    let mut perturb_rng = stream(cfg.seed, Stream::Perturb);
    let mut dropout_rng = stream(cfg.seed, Stream::Dropout);
    let mut langevin_rng = stream(cfg.seed, Stream::Langevin);
    let mut estimate_rng = stream(cfg.seed, Stream::Estimate);
    let target: Tensor<f32> = noisy.to_tensor();
    let mut state = OptimState::new(cfg.optimizer.clone());
    let burn_in = cfg.burn_in();
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut snapshots: Vec<Snapshot> = Vec::new();

    for it in 1..=cfg.iterations {
        let mut g = Graph::new();
        let vars = net.register(&mut g, true);
        let z = g.constant(code.perturb(&mut perturb_rng));
        let out = net.forward(&mut g, &vars, z, ForwardMode::Train, &mut dropout_rng)?;
        let tv = g.constant(target.clone());
        let loss = method.loss().record(&mut g, out.x_hat, out.neg_log_var, tv)?;
        let loss_value = g.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor<f32>> = vars
            .iter()
            .map(|&v| grads.take(v).expect("parameters require gradients"))
            .collect();
        drop(g);
        let t = state.step();
        method
            .update(&mut net, &grads, &mut state, cfg, t, &mut langevin_rng)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { iteration: it },
                e => e,
            })?;

        if method.keeps_snapshots() && it > burn_in && (it - burn_in).is_multiple_of(cfg.snapshot_every) {
            snapshots.push(snapshot(&net, &code, it)?);
            if snapshots.len() > cfg.mc_samples {
                snapshots.remove(0);
            }
        }

        if it % cfg.trace_every == 0 || it == cfg.iterations {
            let est = method.estimate(&net, &code, cfg, &mut estimate_rng)?;
            let row = trace_row(it, loss_value, &est, noisy, gt)?;
            observe(&row);
            trace.push(TraceRow {
                wall_ms: Some(start.elapsed().as_secs_f64() * 1e3),
                ..row
            });
        }
    }
    if method.keeps_snapshots() && snapshots.is_empty() {
        snapshots.push(snapshot(&net, &code, cfg.iterations)?);
    }
    Ok(TrainedRun {
        config: RunConfig {
            generator: gen_cfg,
            ..cfg.clone()
        },
        net,
        code,
        trace,
        snapshots,
    })
}

fn snapshot(net: &GeneratorNet<f32>, code: &InputCode<f32>, iteration: usize) -> Result<Snapshot> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let (x, nlv) = net.predict(&code.z0, ForwardMode::Deterministic, &mut unused)?;
    let variance = match nlv {
        Some(s) => Some(Image::from_tensor(&s)?.map(|v| (-v).exp())),
        None => None,
    };
    Ok(Snapshot {
        iteration,
        x_hat: Image::from_tensor(&x)?,
        variance,
    })
}

fn trace_row(
    iteration: usize,
    loss: f64,
    est: &Estimate,
    noisy: &Image,
    gt: Option<&Image>,
) -> Result<TraceRow> {
    let (psnr_gt, ssim_gt) = match gt {
        Some(gt) => {
            let s = if gt.width() >= SSIM_WINDOW && gt.height() >= SSIM_WINDOW {
                Some(ssim(&est.x_hat, gt)?)
            } else {
                None
            };
            (Some(psnr(&est.x_hat, gt, 1.0)?), s)
        }
        None => (None, None),
    };
    Ok(TraceRow {
        iteration,
        loss,
        mse_noisy: mse(&est.x_hat, noisy)?,
        psnr_noisy: psnr(&est.x_hat, noisy, 1.0)?,
        psnr_gt,
        ssim_gt,
        u: est.u,
        wall_ms: None,
    })
}

/// Final predictive estimate of `run` with its own method.
pub fn predict_run(run: &TrainedRun) -> Result<PredictiveResult> {
    let method = MethodRegistry::default().get(&run.config.method)?;
    method.predict(run, &mut stream(run.config.seed, Stream::Predict))
}
