//! Finite-difference helpers and the verification harness behind the
//! `gradcheck` command.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::node::oracle::{stored_backprop, stored_backprop_first_order};
use crate::node::{random_params, ConvField, ConvMap, LinearField};
use crate::solvers::{IntegrationConfig, SolverKind};
use crate::tensor::{Activation, Graph, Tensor, Var};
use crate::unet::{BlockKind, ContinuousUNet, UNetConfig};
use crate::{DynamicBlock, FirstOrderBlock};

/// `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = reference.iter().map(|b| b.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-12)
}

/// Relative error across several tensors, pooled into one vector.
pub fn relative_error_tensors(analytic: &[Tensor], reference: &[Tensor]) -> f64 {
    let a: Vec<f64> = analytic.iter().flat_map(|t| t.data().iter().copied()).collect();
    let b: Vec<f64> = reference.iter().flat_map(|t| t.data().iter().copied()).collect();
    relative_error(&a, &b)
}

/// Central differences `(f(x + δeᵢ) − f(x − δeᵢ)) / 2δ` for every coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Central differences of a scalar function of one tensor.
pub fn tensor_central_difference<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let shape = x.shape().to_vec();
    let grad = central_difference(
        |v| f(&Tensor::new(shape.clone(), v.to_vec()).expect("same shape")),
        x.data(),
        step,
    )?;
    Tensor::new(shape, grad)
}

/// Deliberate corruption used to confirm the harness notices broken gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negate every gradient returned by `adjoint_backward`.
    AdjointSign,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// `check,max_rel_error,tolerance,passed`.
pub fn report_csv(results: &[CheckResult]) -> String {
    let mut out = String::from("check,max_rel_error,tolerance,passed\n");
    for r in results {
        out.push_str(&format!("{},{:e},{:e},{}\n", r.name, r.max_rel_error, r.tolerance, r.passed()));
    }
    out
}

const FD_STEP: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Graph gradient of `⟨w, f(inputs)⟩` vs central differences over every input.
fn graph_check<F>(name: &str, inputs: &[Tensor], tol: f64, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        g.value(y).clone()
    };
    let w = Tensor::randn(probe.shape().to_vec(), 1.0, &mut rng(99));
    let loss = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        Ok(g.value(y).dot(&w))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let grads = g.vjp(y, w.clone())?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, (v, t)) in vars.iter().zip(inputs).enumerate() {
        analytic.extend_from_slice(grads.get_or_zeros(*v, t).data());
        let fd = tensor_central_difference(
            |x| {
                let mut vals = inputs.to_vec();
                vals[i] = x.clone();
                loss(&vals)
            },
            t,
            FD_STEP,
        )?;
        numeric.extend_from_slice(fd.data());
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: relative_error(&analytic, &numeric),
        tolerance: tol,
    })
}

fn flip(grads: Vec<Tensor>, fault: Option<Fault>) -> Vec<Tensor> {
    match fault {
        Some(Fault::AdjointSign) => grads.iter().map(|g| g.scale(-1.0)).collect(),
        None => grads,
    }
}

fn scalar_block(theta: &[f64], steps: usize) -> Result<DynamicBlock> {
    DynamicBlock::new(
        Arc::new(LinearField { arity: 2 }),
        LinearField::coefficients(&theta[..2]),
        Some(Arc::new(LinearField { arity: 1 })),
        LinearField::coefficients(&theta[2..]),
        IntegrationConfig::unit(steps)?,
        SolverKind::RK4,
    )
}

fn adjoint_vs_finite_differences(fault: Option<Fault>) -> Result<CheckResult> {
    let theta = [-1.3, -0.2, 0.4];
    let steps = 100;
    let x0 = Tensor::new([1, 1, 2], vec![0.7, -1.1])?;
    let w = Tensor::new([1, 1, 2], vec![1.0, 0.5])?;
    let loss = |th: &[f64], x: &Tensor| -> Result<f64> { Ok(scalar_block(th, steps)?.forward(x)?.dot(&w)) };
    let grads = scalar_block(&theta, steps)?.adjoint_backward(&x0, &w)?;
    let mut analytic = vec![grads.grad_x0];
    analytic.extend(grads.grad_field);
    analytic.extend(grads.grad_init);
    let analytic = flip(analytic, fault);
    let mut numeric = vec![tensor_central_difference(|x| loss(&theta, x), &x0, FD_STEP)?];
    numeric.extend(
        central_difference(|th| loss(th, &x0), &theta, FD_STEP)?
            .into_iter()
            .map(Tensor::scalar),
    );
    Ok(CheckResult {
        name: "adjoint_backward/finite_differences".into(),
        max_rel_error: relative_error_tensors(&analytic, &numeric),
        tolerance: 1e-3,
    })
}

fn adjoint_vs_stored_backprop(fault: Option<Fault>) -> Result<CheckResult> {
    let mut r = rng(7);
    let accel = ConvField::acceleration(2);
    let g = ConvMap { channels: 2 };
    let ap = random_params(&accel, 0.2, &mut r);
    let gp = random_params(&g, 0.2, &mut r);
    let block = DynamicBlock::new(
        Arc::new(accel),
        ap,
        Some(Arc::new(g)),
        gp,
        IntegrationConfig::unit(50)?,
        SolverKind::RK4,
    )?;
    let x0 = Tensor::randn([2, 8, 8], 1.0, &mut r);
    let up = Tensor::randn([2, 8, 8], 1.0, &mut r);
    let adj = block.adjoint_backward(&x0, &up)?;
    let oracle = stored_backprop(&block, &x0, &up)?;
    let mut a = vec![adj.grad_x0];
    a.extend(adj.grad_field);
    a.extend(adj.grad_init);
    let mut b = vec![oracle.grad_x0];
    b.extend(oracle.grad_field);
    b.extend(oracle.grad_init);
    Ok(CheckResult {
        name: "adjoint_backward/stored_backprop".into(),
        max_rel_error: relative_error_tensors(&flip(a, fault), &b),
        tolerance: 1e-3,
    })
}

fn first_order_vs_stored_backprop(fault: Option<Fault>) -> Result<CheckResult> {
    let mut r = rng(8);
    let field = ConvField::velocity(2);
    let params = random_params(&field, 0.2, &mut r);
    let block = FirstOrderBlock::new(Arc::new(field), params, IntegrationConfig::unit(50)?, SolverKind::RK4)?;
    let x0 = Tensor::randn([2, 8, 8], 1.0, &mut r);
    let up = Tensor::randn([2, 8, 8], 1.0, &mut r);
    let adj = block.adjoint_backward(&x0, &up)?;
    let oracle = stored_backprop_first_order(&block, &x0, &up)?;
    let mut a = vec![adj.grad_x0];
    a.extend(adj.grad_field);
    let mut b = vec![oracle.grad_x0];
    b.extend(oracle.grad_field);
    Ok(CheckResult {
        name: "first_order_adjoint/stored_backprop".into(),
        max_rel_error: relative_error_tensors(&flip(a, fault), &b),
        tolerance: 1e-3,
    })
}

/// End-to-end U-Net gradient on a 16×16 input vs central differences over
/// `probes` coordinates spread across every parameter tensor.
pub fn unet_check(kind: BlockKind, steps: usize, probes: usize, seed: u64) -> Result<CheckResult> {
    let cfg = UNetConfig {
        block_kind: kind,
        steps_per_block: steps,
        ..UNetConfig::default()
    };
    let mut net = ContinuousUNet::build(&cfg, seed)?;
    let mut r = rng(seed);
    // move off the identity initialisation so every block contributes
    for p in net.params_mut() {
        let noise = Tensor::randn(p.shape().to_vec(), 0.1, &mut r);
        p.axpy(1.0, &noise);
    }
    let image = Tensor::uniform([1, 16, 16], 0.0, 1.0, &mut r);
    let mask = Tensor::new(
        [1, 16, 16],
        (0..256).map(|i| if (i / 16 + i % 16) % 5 < 2 { 1.0 } else { 0.0 }).collect(),
    )?;
    let (_, grads) = net.loss_and_grads(&image, &mask)?;
    let loss_at = |net: &ContinuousUNet| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(image.clone().as_batch()?);
        let t = g.constant(mask.clone().as_batch()?);
        let vars = net.param_vars(&mut g, false);
        let pred = net.record(&mut g, x, &vars)?;
        let loss = g.bce_loss(pred, t)?;
        Ok(g.value(loss).data()[0])
    };
    let n_tensors = net.params().len();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for k in 0..probes {
        let ti = k % n_tensors;
        let len = net.params()[ti].numel();
        let idx = (k / n_tensors * 7919 + k * 31) % len;
        let orig = net.params()[ti].data()[idx];
        net.params_mut()[ti].data_mut()[idx] = orig + FD_STEP;
        let up = loss_at(&net)?;
        net.params_mut()[ti].data_mut()[idx] = orig - FD_STEP;
        let down = loss_at(&net)?;
        net.params_mut()[ti].data_mut()[idx] = orig;
        analytic.push(grads[ti].data()[idx]);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(CheckResult {
        name: format!("unet_{}/finite_differences", kind.name().to_lowercase()),
        max_rel_error: relative_error(&analytic, &numeric),
        tolerance: 1e-3,
    })
}

/// Every finite-difference and oracle-equivalence check, in a fixed order.
pub fn run_checks(fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let mut r = rng(1);
    let x16 = Tensor::randn([1, 2, 16, 16], 1.0, &mut r);
    let k3 = Tensor::randn([3, 2, 3, 3], 0.5, &mut r);
    let b3 = Tensor::randn([3], 0.5, &mut r);
    let x6 = Tensor::randn([2, 4, 6, 6], 1.0, &mut r);
    let k6 = Tensor::randn([5, 4, 3, 3], 0.5, &mut r);
    let b6 = Tensor::randn([5], 0.5, &mut r);
    let small = Tensor::randn([1, 2, 4, 4], 1.0, &mut r);
    let other = Tensor::randn([1, 3, 4, 4], 1.0, &mut r);
    let probs = Tensor::uniform([1, 1, 4, 4], 0.05, 0.95, &mut r);
    let target = Tensor::new([1, 1, 4, 4], (0..16).map(|i| f64::from(i % 3 == 0)).collect())?;

    let mut out = vec![
        graph_check("conv2d/direct", &[x16, k3, b3], 1e-4, |g, v| g.conv2d(v[0], v[1], v[2], 1))?,
        graph_check("conv2d/im2col", &[x6, k6, b6], 1e-4, |g, v| g.conv2d(v[0], v[1], v[2], 1))?,
    ];
    for act in [Activation::Softplus, Activation::Sigmoid, Activation::Tanh] {
        let name = format!("activation/{act:?}").to_lowercase();
        out.push(graph_check(&name, &[small.clone()], 1e-4, move |g, v| Ok(g.activation(v[0], act)))?);
    }
    out.push(graph_check("downsample", &[small.clone()], 1e-4, |g, v| g.downsample(v[0]))?);
    out.push(graph_check("upsample", &[small.clone()], 1e-4, |g, v| g.upsample(v[0]))?);
    out.push(graph_check("concat_channels", &[small, other], 1e-4, |g, v| {
        g.concat_channels(v[0], v[1])
    })?);
    out.push(graph_check("bce_loss", &[probs], 1e-4, move |g, v| {
        let t = g.constant(target.clone());
        g.bce_loss(v[0], t)
    })?);
    out.push(adjoint_vs_finite_differences(fault)?);
    out.push(adjoint_vs_stored_backprop(fault)?);
    out.push(first_order_vs_stored_backprop(fault)?);
    for kind in BlockKind::ALL {
        out.push(unet_check(kind, UNetConfig::default().steps_per_block, 40, 3)?);
    }
    Ok(out)
}
