//! Central finite-difference checks of analytic gradients (double precision).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Builds the computation under test from leaves holding `inputs`.
pub trait GradOp: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> GradOp for F {}

/// Fixed projection weights so non-scalar outputs reduce to a scalar whose
/// gradient exercises every output element.
fn projection(len: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let data = (0..len)
        .map(|_| {
            let w: f64 = rng.random_range(0.5..1.5);
            if rng.random::<bool>() {
                w
            } else {
                -w
            }
        })
        .collect();
    Tensor::new([len], data).expect("length matches")
}

fn reduce(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = g.value(out).shape().to_vec();
    let w = projection(g.value(out).len());
    let w = g.constant(Tensor::new(shape, w.into_data())?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn evaluate(op: &impl GradOp, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let loss = reduce(&mut g, out)?;
    let v = g.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check forward".into()));
    }
    Ok(v)
}

/// Analytic gradients of the reduced output w.r.t. every input.
pub fn analytic_gradients(op: &impl GradOp, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let loss = reduce(&mut g, out)?;
    let mut grads = g.backward(loss)?;
    vars.iter()
        .map(|&v| {
            grads
                .take(v)
                .ok_or_else(|| Error::InvalidArgument("input lost its gradient".into()))
        })
        .collect()
}

/// Central-difference gradients of the reduced output w.r.t. every input.
pub fn numeric_gradients(
    op: &impl GradOp,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<Vec<Tensor<f64>>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + eps;
            let plus = evaluate(op, &work)?;
            work[i].data_mut()[j] = x - eps;
            let minus = evaluate(op, &work)?;
            work[i].data_mut()[j] = x;
            grad.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Max over elements of `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn max_relative_error(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> Result<f64> {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
            let denom = x.abs().max(y.abs()).max(1e-12);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    Ok(worst)
}

/// Compares the engine's gradient of `op` against central differences and
/// returns the maximum relative error.
pub fn grad_check(op: impl GradOp, inputs: &[Tensor<f64>], eps: f64) -> Result<f64> {
    grad_check_scaled(op, inputs, eps, 1.0)
}

/// As [`grad_check`], with the analytic gradient multiplied by
/// `analytic_scale` before comparison. A scale other than 1 simulates a
/// broken backward rule.
pub fn grad_check_scaled(
    op: impl GradOp,
    inputs: &[Tensor<f64>],
    eps: f64,
    analytic_scale: f64,
) -> Result<f64> {
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be in [1e-8, 1e-3], got {eps}"
        )));
    }
    if inputs.iter().any(|t| !t.all_finite()) {
        return Err(Error::NonFinite("grad_check input".into()));
    }
    let mut analytic = analytic_gradients(&op, inputs)?;
    for t in &mut analytic {
        t.data_mut().iter_mut().for_each(|v| *v *= analytic_scale);
    }
    let numeric = numeric_gradients(&op, inputs, eps)?;
    max_relative_error(&analytic, &numeric)
}
