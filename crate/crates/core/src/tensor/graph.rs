use std::fmt;

use serde::{Deserialize, Serialize};

use super::conv::{conv2d_backward, conv2d_forward};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Not twice differentiable at 0; avoid inside ODE fields.
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }

    /// Whether the map is at least twice continuously differentiable.
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Operation with a hand-written vector-Jacobian product, recorded as one node.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input (same order as recorded), `None` meaning zero.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

pub const BCE_EPS: f64 = 1e-7;

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// `input * s` where `s` is a one-element tensor.
    ScaleBy {
        input: Var,
        factor: Var,
    },
    LinComb {
        base: Var,
        terms: Vec<(f64, Var)>,
    },
    Sum {
        input: Var,
    },
    Bce {
        pred: Var,
        target: Var,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::Act { input, .. }
            | Op::MaxPool2 { input, .. }
            | Op::Upsample2 { input }
            | Op::Sum { input } => vec![*input],
            Op::Concat { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::ScaleBy { input, factor } => vec![*input, *factor],
            Op::LinComb { base, terms } => {
                let mut v = vec![*base];
                v.extend(terms.iter().map(|(_, t)| *t));
                v
            }
            Op::Bce { pred, target } => vec![*pred, *target],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in execution order, so
/// the tape index is already a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros shaped like `like` when it was unreachable.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(like))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let out = conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            padding,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            },
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let out = self.value(input).map(|x| kind.apply(x));
        self.push(out, Op::Act { input, kind })
    }

    /// 2×2 max pooling.
    pub fn downsample(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("downsample")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "downsample",
                format!("spatial extents must be even, got {h}x{w}"),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let d = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for idx in [
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ] {
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("upsample")?;
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..][..h * w];
            let dst = &mut out[plane * ho * wo..][..ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    dst[i * wo + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(out, Op::Upsample2 { input }))
    }

    /// Channel-wise concatenation, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (na, ca, ha, wa) = ta.dims4("concat_channels")?;
        let (nb, cb, hb, wb) = tb.dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity(na * (ca + cb) * plane);
        for s in 0..na {
            out.extend_from_slice(&ta.data()[s * ca * plane..][..ca * plane]);
            out.extend_from_slice(&tb.data()[s * cb * plane..][..cb * plane]);
        }
        let out = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        Ok(self.push(out, Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "add")?;
        let out = Tensor::lincomb(self.value(a), &[(1.0, self.value(b))]);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Multiply every element of `input` by the single value held in `factor`.
    pub fn scale_by(&mut self, input: Var, factor: Var) -> Result<Var> {
        let f = self.value(factor);
        if f.numel() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("factor must hold one value, got {:?}", f.shape()),
            ));
        }
        let s = f.data()[0];
        let out = self.value(input).scale(s);
        Ok(self.push(out, Op::ScaleBy { input, factor }))
    }

    /// `base + Σ cᵢ·termᵢ`.
    pub fn lincomb(&mut self, base: Var, terms: &[(f64, Var)]) -> Result<Var> {
        let b = self.value(base);
        let mut out = b.clone();
        for &(c, t) in terms {
            let tv = self.value(t);
            b.same_shape(tv, "lincomb")?;
            out.axpy(c, tv);
        }
        Ok(self.push(
            out,
            Op::LinComb {
                base,
                terms: terms.to_vec(),
            },
        ))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let zero = self.constant(Tensor::zeros_like(self.value(input)));
        self.lincomb(zero, &[(factor, input)])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum { input })
    }

    /// Mean binary cross-entropy; predictions are clamped to `[ε, 1−ε]`.
    pub fn bce_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.same_shape(t, "bce_loss")?;
        let n = p.numel() as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        Ok(self.push(Tensor::scalar(total / n), Op::Bce { pred, target }))
    }

    /// Record a node whose output and backward rule are supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.vjp(loss, Tensor::ones(shape.to_vec()))
    }

    /// Vector-Jacobian product: propagate `cotangent` (shaped like `output`)
    /// back to every reachable node that requires a gradient.
    pub fn vjp(&self, output: Var, cotangent: Tensor) -> Result<Gradients> {
        self.value(output).same_shape(&cotangent, "vjp")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(cotangent);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            } => {
                let (dx, dk, db) = conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    self.value(*bias),
                    *padding,
                    g,
                )?;
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *kernel, dk);
                self.accumulate(grads, *bias, db);
            }
            Op::Act { input, kind } => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&x, &y), &g)| g * kind.derivative(x, y))
                    .collect();
                self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = Tensor::zeros_like(self.value(*input));
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[src] += gv;
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Upsample2 { input } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4("upsample")?;
                let wo = 2 * w;
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let src = &g.data()[plane * 4 * h * w..][..4 * h * w];
                    let dst = &mut dx[plane * h * w..][..h * w];
                    for (idx, &gv) in src.iter().enumerate() {
                        let (i, j) = (idx / wo, idx % wo);
                        dst[(i / 2) * w + j / 2] += gv;
                    }
                }
                self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::Concat { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, ca, h, w) = ta.dims4("concat_channels")?;
                let cb = tb.shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(ta.numel());
                let mut db = Vec::with_capacity(tb.numel());
                for s in 0..n {
                    let chunk = &g.data()[s * (ca + cb) * plane..][..(ca + cb) * plane];
                    da.extend_from_slice(&chunk[..ca * plane]);
                    db.extend_from_slice(&chunk[ca * plane..]);
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let db = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
            }
            Op::ScaleBy { input, factor } => {
                let f = self.value(*factor);
                let s = f.data()[0];
                self.accumulate(grads, *input, g.scale(s));
                let df = g.dot(self.value(*input));
                self.accumulate(grads, *factor, Tensor::new(f.shape().to_vec(), vec![df])?);
            }
            Op::LinComb { base, terms } => {
                self.accumulate(grads, *base, g.clone());
                for &(c, t) in terms {
                    self.accumulate(grads, t, g.scale(c));
                }
            }
            Op::Sum { input } => {
                let x = self.value(*input);
                self.accumulate(grads, *input, Tensor::full(x.shape().to_vec(), g.data()[0]));
            }
            Op::Bce { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let scale = g.data()[0] / p.numel() as f64;
                let dp = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&p, &t)| {
                        if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            scale * ((1.0 - t) / (1.0 - p) - t / p)
                        }
                    })
                    .collect();
                self.accumulate(grads, *pred, Tensor::new(p.shape().to_vec(), dp)?);
                let dt = p
                    .data()
                    .iter()
                    .map(|&p| {
                        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        scale * ((1.0 - p).ln() - p.ln())
                    })
                    .collect();
                self.accumulate(grads, *target, Tensor::new(t.shape().to_vec(), dt)?);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let input_grads = op.backward(&values, &node.value, g)?;
                if input_grads.len() != inputs.len() {
                    return Err(Error::shape(
                        "custom op",
                        format!(
                            "{} returned {} gradients for {} inputs",
                            op.name(),
                            input_grads.len(),
                            inputs.len()
                        ),
                    ));
                }
                for (var, grad) in inputs.iter().zip(input_grads) {
                    if let Some(grad) = grad {
                        self.value(*var).same_shape(&grad, "custom op")?;
                        self.accumulate(grads, *var, grad);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.activation(x, Activation::Relu);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.activation(z, Activation::Sigmoid);
        assert_eq!(g.value(s).data(), &[0.5]);
        let sp = g.activation(z, Activation::Softplus);
        assert!((g.value(sp).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones([2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones([2]));
        let y = g.param(Tensor::ones([2]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(y).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn downsample_rejects_odd() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([1, 1, 3, 4]));
        assert!(g.downsample(x).is_err());
    }

    #[test]
    fn bce_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.param(Tensor::scalar(0.5));
        let t = g.constant(Tensor::scalar(1.0));
        let l = g.bce_loss(p, t).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let near = g.constant(Tensor::scalar(1.0 - BCE_EPS));
        let l = g.bce_loss(near, t).unwrap();
        assert!((g.value(l).data()[0] - BCE_EPS).abs() < 1e-12);
    }

    #[test]
    fn concat_planes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let b = g.constant(Tensor::ones([1, 1, 2, 2]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 2, 2, 2]);
        assert_eq!(g.value(c).data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let bad = g.constant(Tensor::ones([1, 1, 4, 4]));
        assert!(g.concat_channels(a, bad).is_err());
    }
}
