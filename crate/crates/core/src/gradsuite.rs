//! Finite-difference checks of every differentiable primitive and of the
//! composed generator likelihood loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::netgen::{build_generator, ForwardMode, GeneratorConfig};
use crate::tensor::gradcheck::grad_check_scaled;
use crate::tensor::{DropoutMode, Graph, Tensor, Var};

/// Largest acceptable relative error between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Central-difference step used by the suite.
pub const FD_STEP: f64 = 1e-6;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

/// Names of the checks run by [`run_suite`], in order.
pub const CHECKS: [&str; 21] = [
    "conv2d",
    "conv2d_stride2",
    "upsample_bilinear",
    "leaky_relu",
    "sigmoid",
    "instance_norm",
    "dropout",
    "concat",
    "narrow",
    "clamp",
    "add",
    "sub",
    "mul",
    "scale",
    "square",
    "exp",
    "sum",
    "mean",
    "mse_loss",
    "nll_loss",
    "generator_nll",
];

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Values with magnitude in `[gap, hi]` and random sign, keeping clear of a
/// kink at zero.
fn away_from_zero(shape: &[usize], gap: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..hi);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("sized")
}

fn generator_config() -> GeneratorConfig {
    GeneratorConfig {
        depth: 2,
        channels: vec![4, 6],
        skip_channels: vec![2, 2],
        kernel_size: 3,
        dropout_p: 0.3,
        input_channels: 3,
        output_heads: 2,
        seed: 11,
        ..GeneratorConfig::default()
    }
}

/// Runs one named check. `analytic_scale` multiplies the analytic gradient
/// before comparison; any value other than 1 simulates a faulty backward rule.
pub fn run_check(name: &str, analytic_scale: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    let check = |op: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]| {
        grad_check_scaled(op, inputs, FD_STEP, analytic_scale)
    };
    let err = match name {
        "conv2d" => check(
            &|g, v| g.conv2d(v[0], v[1], v[2], 1, 1),
            &[
                random(&[2, 6, 5], -1.0, 1.0, &mut rng),
                random(&[3, 2, 3, 3], -1.0, 1.0, &mut rng),
                random(&[3], -1.0, 1.0, &mut rng),
            ],
        )?,
        "conv2d_stride2" => check(
            &|g, v| g.conv2d(v[0], v[1], v[2], 2, 1),
            &[
                random(&[2, 8, 8], -1.0, 1.0, &mut rng),
                random(&[3, 2, 3, 3], -1.0, 1.0, &mut rng),
                random(&[3], -1.0, 1.0, &mut rng),
            ],
        )?,
        "upsample_bilinear" => check(
            &|g, v| g.upsample_bilinear(v[0], 2),
            &[random(&[2, 3, 4], -1.0, 1.0, &mut rng)],
        )?,
        "leaky_relu" => check(
            &|g, v| g.leaky_relu(v[0], 0.2),
            &[away_from_zero(&[3, 4, 4], 0.05, 2.0, &mut rng)],
        )?,
        "sigmoid" => check(
            &|g, v| Ok(g.sigmoid(v[0])),
            &[random(&[3, 4, 4], -4.0, 4.0, &mut rng)],
        )?,
        "instance_norm" => check(
            &|g, v| g.instance_norm(v[0], v[1], v[2], 1e-5),
            &[
                random(&[3, 4, 5], -1.0, 1.0, &mut rng),
                random(&[3], 0.5, 1.5, &mut rng),
                random(&[3], -0.5, 0.5, &mut rng),
            ],
        )?,
        "dropout" => check(
            &|g, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(7);
                g.dropout(v[0], 0.3, DropoutMode::Train, &mut mask_rng)
            },
            &[random(&[3, 4, 4], -1.0, 1.0, &mut rng)],
        )?,
        "concat" => check(
            &|g, v| g.concat(&[v[0], v[1]]),
            &[
                random(&[2, 3, 3], -1.0, 1.0, &mut rng),
                random(&[1, 3, 3], -1.0, 1.0, &mut rng),
            ],
        )?,
        "narrow" => check(
            &|g, v| g.narrow(v[0], 1, 2),
            &[random(&[4, 3, 3], -1.0, 1.0, &mut rng)],
        )?,
        "clamp" => {
            let mut x = away_from_zero(&[3, 4, 4], 0.0, 2.0, &mut rng);
            x.data_mut().iter_mut().for_each(|v| {
                if (v.abs() - 1.0).abs() < 0.05 {
                    *v *= 0.9;
                }
            });
            check(&|g, v| Ok(g.clamp(v[0], -1.0, 1.0)), &[x])?
        }
        "add" | "sub" | "mul" => {
            let a = random(&[2, 3, 3], -1.0, 1.0, &mut rng);
            let b = random(&[2, 3, 3], -1.0, 1.0, &mut rng);
            match name {
                "add" => check(&|g, v| g.add(v[0], v[1]), &[a, b])?,
                "sub" => check(&|g, v| g.sub(v[0], v[1]), &[a, b])?,
                _ => check(&|g, v| g.mul(v[0], v[1]), &[a, b])?,
            }
        }
        "scale" => check(
            &|g, v| Ok(g.scale(v[0], -1.7)),
            &[random(&[2, 3, 3], -1.0, 1.0, &mut rng)],
        )?,
        "square" => check(
            &|g, v| Ok(g.square(v[0])),
            &[random(&[2, 3, 3], -1.0, 1.0, &mut rng)],
        )?,
        "exp" => check(
            &|g, v| Ok(g.exp(v[0])),
            &[random(&[2, 3, 3], -2.0, 2.0, &mut rng)],
        )?,
        "sum" => check(
            &|g, v| {
                let sq = g.square(v[0]);
                Ok(g.sum(sq))
            },
            &[random(&[2, 3, 3], -1.0, 1.0, &mut rng)],
        )?,
        "mean" => check(
            &|g, v| {
                let sq = g.square(v[0]);
                Ok(g.mean(sq))
            },
            &[random(&[2, 3, 3], -1.0, 1.0, &mut rng)],
        )?,
        "mse_loss" => check(
            &|g, v| g.mse_loss(v[0], v[1]),
            &[
                random(&[1, 4, 4], 0.0, 1.0, &mut rng),
                random(&[1, 4, 4], 0.0, 1.0, &mut rng),
            ],
        )?,
        "nll_loss" => check(
            &|g, v| g.nll_loss(v[0], v[1], v[2]),
            &[
                random(&[1, 4, 4], 0.0, 1.0, &mut rng),
                random(&[1, 4, 4], -2.0, 3.0, &mut rng),
                random(&[1, 4, 4], 0.0, 1.0, &mut rng),
            ],
        )?,
        "generator_nll" => {
            let cfg = generator_config();
            let net = build_generator::<f64>(&cfg)?;
            let n = net.params().len();
            let mut inputs: Vec<Tensor<f64>> = net.tensors().cloned().collect();
            inputs.push(random(&[cfg.input_channels, 16, 16], 0.0, 0.1, &mut rng));
            inputs.push(random(&[1, 16, 16], 0.0, 1.0, &mut rng));
            let op = |g: &mut Graph<f64>, v: &[Var]| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(3);
                let out = net.forward(g, &v[..n], v[n], ForwardMode::Train, &mut mask_rng)?;
                let s = out.neg_log_var.expect("two heads");
                g.nll_loss(out.x_hat, s, v[n + 1])
            };
            check(&op, &inputs)?
        }
        other => {
            return Err(crate::Error::Unknown {
                kind: "gradient check",
                name: other.to_string(),
                known: CHECKS.join(", "),
            })
        }
    };
    let name = CHECKS.iter().find(|c| **c == name).copied().expect("known");
    Ok(GradReport {
        name,
        max_rel_error: err,
    })
}

/// Runs every check in [`CHECKS`].
pub fn run_suite(analytic_scale: f64) -> Result<Vec<GradReport>> {
    CHECKS.iter().map(|c| run_check(c, analytic_scale)).collect()
}
