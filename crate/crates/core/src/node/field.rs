//! Parameterised maps used as velocity/acceleration fields and as the
//! initial-velocity network.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Activation, Graph, Tensor, Var};

/// A differentiable map `(inputs, t; θ) -> output` recorded on a [`Graph`].
///
/// All inputs and the output share one `[N,C,H,W]` shape.
pub trait Field: Send + Sync + fmt::Debug {
    /// Names and shapes of the parameters, in the order `apply` takes them.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)>;

    fn apply(&self, graph: &mut Graph, inputs: &[Var], t: f64, params: &[Var]) -> Result<Var>;

    /// Fresh parameters. Layers feeding the output are zero so that the
    /// field starts as the zero map.
    fn init_params(&self, rng: &mut dyn rand::RngCore) -> Vec<Tensor> {
        let _ = rng;
        self.param_shapes()
            .into_iter()
            .map(|(_, s)| Tensor::zeros(s))
            .collect()
    }
}

pub(crate) fn check_params(field: &dyn Field, params: &[Tensor]) -> Result<()> {
    let shapes = field.param_shapes();
    if shapes.len() != params.len() {
        return Err(Error::shape(
            "field parameters",
            format!("{field:?} expects {} tensors, got {}", shapes.len(), params.len()),
        ));
    }
    for ((name, shape), p) in shapes.iter().zip(params) {
        if p.shape() != shape.as_slice() {
            return Err(Error::shape(
                "field parameters",
                format!("{name}: expected {shape:?}, got {:?}", p.shape()),
            ));
        }
    }
    Ok(())
}

/// Evaluate without recording gradients.
pub fn eval_field(field: &dyn Field, inputs: &[&Tensor], t: f64, params: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.constant((*x).clone())).collect();
    let pv: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = field.apply(&mut g, &vars, t, &pv)?;
    Ok(g.value(out).clone())
}

/// Field value together with the vector-Jacobian products w.r.t. inputs and
/// parameters for the cotangent `cot`.
pub struct FieldVjp {
    pub value: Tensor,
    pub input_grads: Vec<Tensor>,
    pub param_grads: Vec<Tensor>,
}

pub fn field_vjp(
    field: &dyn Field,
    inputs: &[&Tensor],
    t: f64,
    params: &[Tensor],
    cot: &Tensor,
) -> Result<FieldVjp> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param((*x).clone())).collect();
    let pv: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = field.apply(&mut g, &vars, t, &pv)?;
    let grads = g.vjp(out, cot.clone())?;
    Ok(FieldVjp {
        value: g.value(out).clone(),
        input_grads: vars
            .iter()
            .zip(inputs)
            .map(|(v, x)| grads.get_or_zeros(*v, x))
            .collect(),
        param_grads: pv
            .iter()
            .zip(params)
            .map(|(v, p)| grads.get_or_zeros(*v, p))
            .collect(),
    })
}

fn he_normal(shape: [usize; 4], rng: &mut dyn rand::RngCore) -> Tensor {
    let fan_in = shape[1] * shape[2] * shape[3];
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Two 3×3 convolutions with a smooth activation between them.
///
/// The state inputs (and, optionally, a constant plane holding `t`) are
/// stacked along the channel axis before the first convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvField {
    pub channels: usize,
    pub arity: usize,
    pub hidden: usize,
    pub time_channel: bool,
    pub activation: Activation,
}

impl ConvField {
    /// Acceleration field `f(x, v, t)` for a second-order block.
    pub fn acceleration(channels: usize) -> Self {
        ConvField {
            channels,
            arity: 2,
            hidden: channels,
            time_channel: true,
            activation: Activation::Softplus,
        }
    }

    /// Velocity field `f(x, t)` for a first-order block.
    pub fn velocity(channels: usize) -> Self {
        ConvField {
            arity: 1,
            ..Self::acceleration(channels)
        }
    }

    fn in_channels(&self) -> usize {
        self.arity * self.channels + usize::from(self.time_channel)
    }
}

impl Field for ConvField {
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            (
                "conv1.weight".into(),
                vec![self.hidden, self.in_channels(), 3, 3],
            ),
            ("conv1.bias".into(), vec![self.hidden]),
            (
                "conv2.weight".into(),
                vec![self.channels, self.hidden, 3, 3],
            ),
            ("conv2.bias".into(), vec![self.channels]),
        ]
    }

    fn apply(&self, graph: &mut Graph, inputs: &[Var], t: f64, params: &[Var]) -> Result<Var> {
        if inputs.len() != self.arity || params.len() != 4 {
            return Err(Error::shape(
                "conv field",
                format!("{} inputs / {} params", inputs.len(), params.len()),
            ));
        }
        let mut stacked = inputs[0];
        for &x in &inputs[1..] {
            stacked = graph.concat_channels(stacked, x)?;
        }
        if self.time_channel {
            let (n, _, h, w) = graph.value(inputs[0]).dims4("conv field")?;
            let plane = graph.constant(Tensor::full([n, 1, h, w], t));
            stacked = graph.concat_channels(stacked, plane)?;
        }
        let hidden = graph.conv2d(stacked, params[0], params[1], 1)?;
        let hidden = graph.activation(hidden, self.activation);
        graph.conv2d(hidden, params[2], params[3], 1)
    }

    fn init_params(&self, rng: &mut dyn rand::RngCore) -> Vec<Tensor> {
        vec![
            he_normal([self.hidden, self.in_channels(), 3, 3], rng),
            Tensor::zeros([self.hidden]),
            Tensor::zeros([self.channels, self.hidden, 3, 3]),
            Tensor::zeros([self.channels]),
        ]
    }
}

/// A single 3×3 convolution; the initial-velocity network.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvMap {
    pub channels: usize,
}

impl Field for ConvMap {
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            (
                "weight".into(),
                vec![self.channels, self.channels, 3, 3],
            ),
            ("bias".into(), vec![self.channels]),
        ]
    }

    fn apply(&self, graph: &mut Graph, inputs: &[Var], _t: f64, params: &[Var]) -> Result<Var> {
        graph.conv2d(inputs[0], params[0], params[1], 1)
    }
}

/// `Σ θᵢ·xᵢ` with one scalar coefficient per input.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearField {
    pub arity: usize,
}

impl LinearField {
    pub fn coefficients(values: &[f64]) -> Vec<Tensor> {
        values.iter().map(|&v| Tensor::scalar(v)).collect()
    }
}

impl Field for LinearField {
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        (0..self.arity)
            .map(|i| (format!("theta{i}"), vec![1]))
            .collect()
    }

    fn apply(&self, graph: &mut Graph, inputs: &[Var], _t: f64, params: &[Var]) -> Result<Var> {
        if inputs.len() != self.arity || params.len() != self.arity {
            return Err(Error::shape(
                "linear field",
                format!("{} inputs / {} params", inputs.len(), params.len()),
            ));
        }
        let mut acc = graph.scale_by(inputs[0], params[0])?;
        for i in 1..self.arity {
            let term = graph.scale_by(inputs[i], params[i])?;
            acc = graph.add(acc, term)?;
        }
        Ok(acc)
    }
}

/// The zero map; has no parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ZeroField;

impl Field for ZeroField {
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        Vec::new()
    }

    fn apply(&self, graph: &mut Graph, inputs: &[Var], _t: f64, _params: &[Var]) -> Result<Var> {
        let zeros = Tensor::zeros_like(graph.value(inputs[0]));
        Ok(graph.constant(zeros))
    }
}

/// Uniform init in `[-scale, scale]`, for tests and examples that want a
/// non-trivial field.
pub fn random_params(field: &dyn Field, scale: f64, rng: &mut impl Rng) -> Vec<Tensor> {
    field
        .param_shapes()
        .into_iter()
        .map(|(_, s)| Tensor::uniform(s, -scale, scale, rng))
        .collect()
}
