use rand::Rng;

use super::conv::{ConvGeom, Upsample};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Upsample {
        input: Var,
        plan: Upsample,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid {
        input: Var,
    },
    InstanceNorm {
        input: Var,
        gain: Var,
        shift: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Narrow {
        input: Var,
        start: usize,
    },
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Var,
    },
    Nll {
        pred: Var,
        neg_log_var: Var,
        target: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a computation. Node order is a topological order.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not require grad.
    /// Parameters the loss does not reach get an all-zero gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            self.value(bias).shape(),
            stride,
            pad,
        )?;
        let cols = geom.im2col(self.value(input).data());
        let out = geom.forward(&cols, self.value(kernel).data(), self.value(bias).data());
        let value = Tensor::new([geom.cout, geom.ho, geom.wo], out)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        let plan = Upsample::new(self.value(input).shape(), factor)?;
        let value = Tensor::new(plan.out_shape(), plan.forward(self.value(input).data()))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Upsample { input, plan }, rg))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::InvalidArgument(format!(
                "leaky_relu slope must be in [0, 1), got {slope}"
            )));
        }
        let s = T::of(slope);
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v >= T::zero() { v } else { v * s })
            .collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::LeakyRelu { input, slope: s }, rg))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        let value = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sigmoid { input }, rg)
    }

    pub fn instance_norm(&mut self, input: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "instance_norm eps must be positive, got {eps}"
            )));
        }
        let (c, h, w) = self.value(input).chw()?;
        let n = h * w;
        if n < 2 {
            return Err(Error::shape(
                "instance_norm",
                format!("each channel needs at least 2 pixels, got {h}x{w}"),
            ));
        }
        for (name, v) in [("gain", gain), ("shift", shift)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    "instance_norm",
                    format!("{name} must be [{c}], got {:?}", self.value(v).shape()),
                ));
            }
        }
        let x = self.value(input).data();
        let g = self.value(gain).data();
        let b = self.value(shift).data();
        let mut normalized = Vec::with_capacity(c * n);
        let mut inv_std = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c * n);
        for ch in 0..c {
            let plane = &x[ch * n..(ch + 1) * n];
            let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = plane
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let inv = T::of(1.0 / (var + eps).sqrt());
            let mean = T::of(mean);
            inv_std.push(inv);
            for &v in plane {
                let xh = (v - mean) * inv;
                normalized.push(xh);
                out.push(xh * g[ch] + b[ch]);
            }
        }
        let value = Tensor::new([c, h, w], out)?;
        let rg = self.any_grad(&[input, gain, shift]);
        Ok(self.push(
            value,
            Op::InstanceNorm {
                input,
                gain,
                shift,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Eval mode and `p == 0` return `input` unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        p: f64,
        mode: DropoutMode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if mode == DropoutMode::Eval || p == 0.0 {
            return Ok(input);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Dropout { input, mask }, rg))
    }

    /// Concatenates `[C_i, H, W]` tensors along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (_, h, w) = self.value(*first).chw()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let (c, hh, ww) = self.value(v).chw()?;
            if (hh, ww) != (h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("spatial extent {hh}x{ww} differs from {h}x{w}"),
                ));
            }
            channels += c;
            data.extend_from_slice(self.value(v).data());
        }
        let value = Tensor::new([channels, h, w], data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Channels `start..start + len` of a `[C, H, W]` tensor.
    pub fn narrow(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if start + len > c || len == 0 {
            return Err(Error::shape(
                "narrow",
                format!("channel range {start}..{} outside 0..{c}", start + len),
            ));
        }
        let data = self.value(input).data()[start * h * w..(start + len) * h * w].to_vec();
        let value = Tensor::new([len, h, w], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Narrow { input, start }, rg))
    }

    /// Elementwise clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let x = self.value(input);
        let value = Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|&v| v.max(lo).min(hi)).collect(),
        };
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Clamp { input, lo, hi }, rg)
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    fn map(&mut self, input: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let x = self.value(input);
        let value = Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|&v| f(v)).collect(),
        };
        let rg = self.any_grad(&[input]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let c = T::of(factor);
        self.map(input, |v| v * c, Op::Scale(input, c))
    }

    pub fn square(&mut self, input: Var) -> Var {
        self.map(input, |v| v * v, Op::Square(input))
    }

    pub fn exp(&mut self, input: Var) -> Var {
        self.map(input, |v| v.exp(), Op::Exp(input))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s: T = x.data().iter().copied().sum();
        let m = s / T::of(x.len() as f64);
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(m), Op::Mean(input), rg)
    }

    /// Mean squared error `(1/N) Σ (target - pred)^2`.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape("mse_loss", self.value(pred), self.value(target))?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = T::of(p.len() as f64);
        let s: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (b - a) * (b - a))
            .sum();
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { pred, target }, rg))
    }

    /// Heteroscedastic Gaussian negative log-likelihood with the variance
    /// head given as `s = -log σ²`:
    /// `(1/N) Σ [exp(s) (target - pred)^2 - s]`.
    pub fn nll_loss(&mut self, pred: Var, neg_log_var: Var, target: Var) -> Result<Var> {
        same_shape("nll_loss", self.value(pred), self.value(target))?;
        same_shape("nll_loss", self.value(pred), self.value(neg_log_var))?;
        let (p, s, t) = (
            self.value(pred),
            self.value(neg_log_var),
            self.value(target),
        );
        let n = T::of(p.len() as f64);
        let total: T = p
            .data()
            .iter()
            .zip(s.data())
            .zip(t.data())
            .map(|((&a, &s), &b)| s.exp() * (b - a) * (b - a) - s)
            .sum();
        let rg = self.any_grad(&[pred, neg_log_var, target]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Nll {
                pred,
                neg_log_var,
                target,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.requires_grad.then(|| {
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                    Tensor {
                        shape: node.value.shape().to_vec(),
                        data,
                    }
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (d_in, d_k, d_b) = geom.backward(g, cols, val(*kernel), needs(*input));
                if let Some(d) = d_in {
                    accumulate(&mut grads[input.0], d);
                }
                if needs(*kernel) {
                    accumulate(&mut grads[kernel.0], d_k);
                }
                if needs(*bias) {
                    accumulate(&mut grads[bias.0], d_b);
                }
            }
            Op::Upsample { input, plan } => {
                accumulate(&mut grads[input.0], plan.backward(g));
            }
            Op::LeakyRelu { input, slope } => {
                let d = val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x >= T::zero() { g } else { g * *slope })
                    .collect();
                accumulate(&mut grads[input.0], d);
            }
            Op::Sigmoid { input } => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                accumulate(&mut grads[input.0], d);
            }
            Op::InstanceNorm {
                input,
                gain,
                shift,
                normalized,
                inv_std,
            } => {
                let c = inv_std.len();
                let n = normalized.len() / c;
                let nt = T::of(n as f64);
                let gains = val(*gain);
                let mut d_in = Vec::with_capacity(normalized.len());
                let mut d_gain = Vec::with_capacity(c);
                let mut d_shift = Vec::with_capacity(c);
                for ch in 0..c {
                    let gy = &g[ch * n..(ch + 1) * n];
                    let xh = &normalized[ch * n..(ch + 1) * n];
                    let sum_g: T = gy.iter().copied().sum();
                    let sum_gx: T = gy.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    d_shift.push(sum_g);
                    d_gain.push(sum_gx);
                    if needs(*input) {
                        // dx = inv/n * (n*dxh - Σdxh - xh*Σ(dxh*xh)), dxh = gain*dy
                        let k = gains[ch] * inv_std[ch] / nt;
                        for (&gi, &xi) in gy.iter().zip(xh) {
                            d_in.push(k * (nt * gi - sum_g - xi * sum_gx));
                        }
                    }
                }
                if needs(*input) {
                    accumulate(&mut grads[input.0], d_in);
                }
                if needs(*gain) {
                    accumulate(&mut grads[gain.0], d_gain);
                }
                if needs(*shift) {
                    accumulate(&mut grads[shift.0], d_shift);
                }
            }
            Op::Dropout { input, mask } => {
                let d = g.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                accumulate(&mut grads[input.0], d);
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                for v in inputs {
                    let len = self.nodes[v.0].value.len();
                    if needs(*v) {
                        accumulate(&mut grads[v.0], g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Narrow { input, start } => {
                let x = &self.nodes[input.0].value;
                let plane = x.shape()[1] * x.shape()[2];
                let mut d = vec![T::zero(); x.len()];
                d[start * plane..start * plane + g.len()].copy_from_slice(g);
                accumulate(&mut grads[input.0], d);
            }
            Op::Clamp { input, lo, hi } => {
                let d = val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x < *lo || x > *hi { T::zero() } else { g })
                    .collect();
                accumulate(&mut grads[input.0], d);
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(*v) {
                        accumulate(&mut grads[v.0], g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d = g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                    accumulate(&mut grads[a.0], d);
                }
                if needs(*b) {
                    let d = g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.iter().map(|&v| v * *c).collect());
            }
            Op::Square(a) => {
                let two = T::of(2.0);
                let d = g.iter().zip(val(*a)).map(|(&g, &x)| g * two * x).collect();
                accumulate(&mut grads[a.0], d);
            }
            Op::Exp(a) => {
                let d = g.iter().zip(node.value.data()).map(|(&g, &e)| g * e).collect();
                accumulate(&mut grads[a.0], d);
            }
            Op::Sum(a) => {
                accumulate(&mut grads[a.0], vec![g[0]; self.nodes[a.0].value.len()]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                accumulate(&mut grads[a.0], vec![g[0] / T::of(n as f64); n]);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let k = g[0] * T::of(2.0 / p.len() as f64);
                if needs(*pred) {
                    let d = p.iter().zip(t).map(|(&a, &b)| k * (a - b)).collect();
                    accumulate(&mut grads[pred.0], d);
                }
                if needs(*target) {
                    let d = p.iter().zip(t).map(|(&a, &b)| k * (b - a)).collect();
                    accumulate(&mut grads[target.0], d);
                }
            }
            Op::Nll {
                pred,
                neg_log_var,
                target,
            } => {
                let (p, s, t) = (val(*pred), val(*neg_log_var), val(*target));
                let inv_n = g[0] / T::of(p.len() as f64);
                let two = T::of(2.0);
                if needs(*pred) {
                    let d = p
                        .iter()
                        .zip(s)
                        .zip(t)
                        .map(|((&a, &s), &b)| inv_n * two * s.exp() * (a - b))
                        .collect();
                    accumulate(&mut grads[pred.0], d);
                }
                if needs(*target) {
                    let d = p
                        .iter()
                        .zip(s)
                        .zip(t)
                        .map(|((&a, &s), &b)| inv_n * two * s.exp() * (b - a))
                        .collect();
                    accumulate(&mut grads[target.0], d);
                }
                if needs(*neg_log_var) {
                    let d = p
                        .iter()
                        .zip(s)
                        .zip(t)
                        .map(|((&a, &s), &b)| inv_n * (s.exp() * (b - a) * (b - a) - T::one()))
                        .collect();
                    accumulate(&mut grads[neg_log_var.0], d);
                }
            }
        }
    }
}
