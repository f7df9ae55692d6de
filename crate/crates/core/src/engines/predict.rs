use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TraceRow;
use crate::error::{Error, Result};
use crate::netgen::{ForwardMode, GeneratorNet, InputCode};
use crate::noise::Image;
use crate::tensor::{Scalar, Tensor};

/// Predictive mean with its variance decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveResult {
    pub mean: Image,
    pub epistemic: Image,
    pub aleatoric: Image,
    pub total: Image,
    /// Mean of the total variance map.
    #[serde(rename = "U")]
    pub u: f64,
}

impl PredictiveResult {
    /// Builds the result, setting `total = epistemic + aleatoric`.
    pub fn from_parts(mean: Image, epistemic: Image, aleatoric: Image) -> Result<Self> {
        if !mean.same_shape(&epistemic) || !mean.same_shape(&aleatoric) {
            return Err(Error::shape(
                "predictive result",
                "mean and variance maps differ in size".to_string(),
            ));
        }
        let total_data = epistemic
            .data()
            .iter()
            .zip(aleatoric.data())
            .map(|(e, a)| e + a)
            .collect();
        let total = Image::new(mean.width(), mean.height(), total_data)?;
        let u = total.mean();
        Ok(Self {
            mean,
            epistemic,
            aleatoric,
            total,
            u,
        })
    }

    /// A point estimate with no uncertainty attached.
    pub fn point(mean: Image) -> Self {
        let zeros = mean.map(|_| 0.0);
        Self::from_parts(mean, zeros.clone(), zeros).expect("shapes match")
    }
}

/// Streaming mean and population variance.
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let k = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / k;
            *s += d * (v - *m);
        }
    }

    fn variance(&self) -> Vec<f64> {
        let k = self.n as f64;
        self.m2.iter().map(|s| (s / k).max(0.0)).collect()
    }
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

/// MC dropout prediction with `t` stochastic passes at the unperturbed code.
pub fn mc_predict<T: Scalar, R: Rng + ?Sized>(
    net: &GeneratorNet<T>,
    code: &InputCode<T>,
    t: usize,
    rng: &mut R,
) -> Result<PredictiveResult> {
    mc_predict_threaded(net, code, t, rng, 1)
}

/// As [`mc_predict`], spreading the passes over up to `threads` workers.
/// Each pass draws from its own stream, and moments are reduced in sample
/// order, so the result does not depend on `threads`.
pub fn mc_predict_threaded<T: Scalar, R: Rng + ?Sized>(
    net: &GeneratorNet<T>,
    code: &InputCode<T>,
    t: usize,
    rng: &mut R,
    threads: usize,
) -> Result<PredictiveResult> {
    if net.config().output_heads != 2 {
        return Err(Error::InvalidArgument(
            "MC prediction needs a network with a variance head".into(),
        ));
    }
    if t == 0 {
        return Err(Error::InvalidArgument(
            "MC prediction needs at least one sample".into(),
        ));
    }
    let base: u64 = rng.random();
    let sample = |i: usize| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut r = ChaCha8Rng::seed_from_u64(base);
        r.set_stream(i as u64);
        let (x, nlv) = net.predict(&code.z0, ForwardMode::McSample, &mut r)?;
        let nlv = nlv.expect("two-head network");
        let var = nlv.data().iter().map(|s| (-s.as_f64()).exp()).collect();
        Ok((to_f64(&x), var))
    };
    let threads = threads.clamp(1, t);
    let samples: Vec<Result<(Vec<f64>, Vec<f64>)>> = if threads == 1 {
        (0..t).map(sample).collect()
    } else {
        let mut slots: Vec<Option<Result<(Vec<f64>, Vec<f64>)>>> = (0..t).map(|_| None).collect();
        std::thread::scope(|s| {
            for (w, chunk) in slots.chunks_mut(t.div_ceil(threads)).enumerate() {
                let sample = &sample;
                let start = w * t.div_ceil(threads);
                s.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(sample(start + j));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("filled")).collect()
    };
    let (_, h, w) = code.z0.chw()?;
    let mut moments = Moments::new(h * w);
    let mut aleatoric = vec![0.0; h * w];
    for s in samples {
        let (x, var) = s?;
        moments.push(&x);
        aleatoric.iter_mut().zip(&var).for_each(|(a, v)| *a += v);
    }
    aleatoric.iter_mut().for_each(|a| *a /= t as f64);
    PredictiveResult::from_parts(
        Image::new(w, h, moments.mean.clone())?,
        Image::new(w, h, moments.variance())?,
        Image::new(w, h, aleatoric)?,
    )
}

/// A posterior sample kept during Langevin training.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub x_hat: Image,
    /// Predicted per-pixel variance, for networks with a variance head.
    pub variance: Option<Image>,
}

/// Posterior mean and variance over Langevin snapshots.
pub fn sgld_predict(snapshots: &[Snapshot], with_aleatoric: bool) -> Result<PredictiveResult> {
    let first = snapshots.first().ok_or_else(|| {
        Error::InvalidArgument("posterior averaging needs at least one snapshot".into())
    })?;
    let (w, h) = (first.x_hat.width(), first.x_hat.height());
    let mut moments = Moments::new(w * h);
    let mut aleatoric = vec![0.0; w * h];
    for s in snapshots {
        if !s.x_hat.same_shape(&first.x_hat) {
            return Err(Error::shape("sgld_predict", "snapshots differ in size".to_string()));
        }
        moments.push(s.x_hat.data());
        if with_aleatoric {
            let var = s.variance.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "snapshot at iteration {} has no variance map",
                    s.iteration
                ))
            })?;
            if !var.same_shape(&first.x_hat) {
                return Err(Error::shape("sgld_predict", "variance map differs in size".to_string()));
            }
            aleatoric.iter_mut().zip(var.data()).for_each(|(a, v)| *a += v);
        }
    }
    let n = snapshots.len() as f64;
    aleatoric.iter_mut().for_each(|a| *a /= n);
    PredictiveResult::from_parts(
        Image::new(w, h, moments.mean.clone())?,
        Image::new(w, h, moments.variance())?,
        Image::new(w, h, aleatoric)?,
    )
}

/// Trace column used for oracle early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKey {
    PsnrGt,
    SsimGt,
}

/// Row with the highest `key`; ties resolve to the earliest iteration.
/// Returns `(iteration, value)`.
pub fn oracle_early_stop(trace: &[TraceRow], key: TraceKey) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for row in trace {
        let v = match key {
            TraceKey::PsnrGt => row.psnr_gt,
            TraceKey::SsimGt => row.ssim_gt,
        }
        .ok_or_else(|| {
            Error::InvalidArgument(
                "trace has no ground-truth metrics; supply a ground truth when training".into(),
            )
        })?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((row.iteration, v));
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("trace is empty".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(data: Vec<f64>) -> Snapshot {
        Snapshot {
            iteration: 0,
            x_hat: Image::new(data.len(), 1, data).unwrap(),
            variance: None,
        }
    }

    #[test]
    fn two_point_variance() {
        let a = vec![0.1, 0.5, 0.9];
        let d = [0.2, -0.4, 0.02];
        let b: Vec<f64> = a.iter().zip(&d).map(|(x, y)| x + y).collect();
        let r = sgld_predict(&[snap(a), snap(b)], false).unwrap();
        for (e, d) in r.epistemic.data().iter().zip(d) {
            assert!((e - d * d / 4.0).abs() < 1e-15);
        }
        assert!(r.aleatoric.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_snapshot_has_no_spread() {
        let r = sgld_predict(&[snap(vec![0.3, 0.7])], false).unwrap();
        assert!(r.epistemic.data().iter().all(|&v| v == 0.0));
        assert!(sgld_predict(&[], false).is_err());
        assert!(sgld_predict(&[snap(vec![0.3])], true).is_err());
    }

    #[test]
    fn decomposition_is_exact() {
        let m = Image::new(2, 1, vec![0.5, 0.5]).unwrap();
        let e = Image::new(2, 1, vec![0.1, 0.3]).unwrap();
        let a = Image::new(2, 1, vec![0.2, 0.7]).unwrap();
        let r = PredictiveResult::from_parts(m, e, a).unwrap();
        assert_eq!(r.total.data(), &[0.1 + 0.2, 0.3 + 0.7]);
        assert_eq!(r.u, (0.1 + 0.2 + (0.3 + 0.7)) / 2.0);
    }

    fn row(iteration: usize, psnr: Option<f64>) -> TraceRow {
        TraceRow {
            iteration,
            loss: 0.0,
            mse_noisy: 0.0,
            psnr_noisy: 0.0,
            psnr_gt: psnr,
            ssim_gt: None,
            u: None,
            wall_ms: None,
        }
    }

    #[test]
    fn early_stop_picks_first_maximum() {
        let t = vec![row(1, Some(20.0)), row(2, Some(25.0)), row(3, Some(22.0)), row(4, Some(25.0))];
        assert_eq!(oracle_early_stop(&t, TraceKey::PsnrGt).unwrap(), (2, 25.0));
        assert!(oracle_early_stop(&[row(1, None)], TraceKey::PsnrGt).is_err());
        assert!(oracle_early_stop(&[], TraceKey::PsnrGt).is_err());
    }
}
