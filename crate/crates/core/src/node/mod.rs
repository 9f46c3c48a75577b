//! Neural-ODE blocks.
//!
//! A [`DynamicBlock`] integrates the second-order system
//!
//! ```text
//! x'' = f(x, x', t; θf),   x(t0) = X0,   x'(t0) = g(X0; θg)
//! ```
//!
//! by stacking position and velocity into an [`AugmentedState`] and handing
//! the resulting first-order field to the generic integrators. Gradients come
//! from the adjoint system integrated backward in time, so memory does not
//! grow with the number of steps. A [`FirstOrderBlock`] is the `m = 1` case.

mod adjoint;
pub mod container;
mod field;
mod op;
pub mod oracle;

pub use adjoint::{AdjointGrads, AdjointStats, RetentionMeter};
pub use field::{
    eval_field, field_vjp, random_params, ConvField, ConvMap, Field, FieldVjp, LinearField,
    ZeroField,
};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::solvers::{integrate, IntegrationConfig, OdeSystem, SolverKind};
use crate::tensor::{Graph, Tensor, Var};

use field::check_params;

/// Stacked derivatives `[x, x', …, x^(m-1)]` of an m-th order system.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState {
    pub parts: Vec<Tensor>,
}

impl AugmentedState {
    pub fn new(parts: Vec<Tensor>) -> Result<Self> {
        if let Some(first) = parts.first() {
            for p in &parts[1..] {
                first.same_shape(p, "augmented state")?;
            }
        } else {
            return Err(Error::shape("augmented state", "no components"));
        }
        Ok(AugmentedState { parts })
    }

    /// Position/velocity pair of a second-order block.
    pub fn second_order(x: Tensor, v: Tensor) -> Result<Self> {
        Self::new(vec![x, v])
    }

    pub fn order(&self) -> usize {
        self.parts.len()
    }

    pub fn position(&self) -> &Tensor {
        &self.parts[0]
    }

    pub fn velocity(&self) -> Option<&Tensor> {
        self.parts.get(1)
    }

    pub fn into_position(self) -> Tensor {
        self.parts.into_iter().next().expect("nonempty state")
    }

    pub fn is_finite(&self) -> bool {
        self.parts.iter().all(Tensor::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.parts
            .iter()
            .map(|p| p.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn lincomb(base: &Self, terms: &[(f64, &Self)]) -> Self {
        let parts = (0..base.parts.len())
            .map(|i| {
                let ts: Vec<(f64, &Tensor)> = terms.iter().map(|(c, s)| (*c, &s.parts[i])).collect();
                Tensor::lincomb(&base.parts[i], &ts)
            })
            .collect();
        AugmentedState { parts }
    }
}

/// First-order field `z' = (x₂, …, x_m, f(x₁, …, x_m, t))` obtained from an
/// m-th order block. Borrows the block's field and parameters.
pub struct ReducedField<'a> {
    field: &'a dyn Field,
    params: &'a [Tensor],
    evaluations: usize,
}

impl<'a> ReducedField<'a> {
    pub fn new(field: &'a dyn Field, params: &'a [Tensor]) -> Self {
        ReducedField {
            field,
            params,
            evaluations: 0,
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }
}

impl OdeSystem for ReducedField<'_> {
    type State = AugmentedState;

    fn derivative(&mut self, t: f64, z: &AugmentedState) -> Result<AugmentedState> {
        self.evaluations += 1;
        let inputs: Vec<&Tensor> = z.parts.iter().collect();
        let top = eval_field(self.field, &inputs, t, self.params)?;
        let mut parts: Vec<Tensor> = z.parts[1..].to_vec();
        parts.push(top);
        Ok(AugmentedState { parts })
    }

    fn combine(&mut self, base: &AugmentedState, terms: &[(f64, &AugmentedState)]) -> Result<AugmentedState> {
        Ok(AugmentedState::lincomb(base, terms))
    }

    fn is_finite(&self, z: &AugmentedState) -> bool {
        z.is_finite()
    }
}

/// Restore the rank of `like` on a batched result.
fn match_rank(t: Tensor, like: &[usize]) -> Result<Tensor> {
    if t.shape() == like {
        Ok(t)
    } else {
        t.reshape(like.to_vec())
    }
}

/// Second-order neural-ODE block.
#[derive(Clone, Debug)]
pub struct DynamicBlock {
    /// Acceleration field `f(x, x', t)`.
    pub accel: Arc<dyn Field>,
    pub accel_params: Vec<Tensor>,
    /// Initial-velocity network `g(x0)`; `None` is the parameter-free zero map.
    pub init_velocity: Option<Arc<dyn Field>>,
    pub init_params: Vec<Tensor>,
    pub span: IntegrationConfig,
    pub solver: SolverKind,
}

impl DynamicBlock {
    pub fn new(
        accel: Arc<dyn Field>,
        accel_params: Vec<Tensor>,
        init_velocity: Option<Arc<dyn Field>>,
        init_params: Vec<Tensor>,
        span: IntegrationConfig,
        solver: SolverKind,
    ) -> Result<Self> {
        check_params(accel.as_ref(), &accel_params)?;
        match &init_velocity {
            Some(g) => check_params(g.as_ref(), &init_params)?,
            None if !init_params.is_empty() => {
                return Err(Error::shape(
                    "dynamic block",
                    "parameters given for an absent initial-velocity network",
                ))
            }
            None => {}
        }
        span.validate()?;
        Ok(DynamicBlock {
            accel,
            accel_params,
            init_velocity,
            init_params,
            span,
            solver,
        })
    }

    /// Convolutional block over `channels` feature maps: the acceleration
    /// field starts at zero and `g` is zero, so the block is the identity.
    pub fn conv(
        channels: usize,
        span: IntegrationConfig,
        solver: SolverKind,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self> {
        let accel = ConvField::acceleration(channels);
        let accel_params = accel.init_params(rng);
        let g = ConvMap { channels };
        let init_params = g.init_params(rng);
        Self::new(
            Arc::new(accel),
            accel_params,
            Some(Arc::new(g)),
            init_params,
            span,
            solver,
        )
    }

    /// The first-order field over the augmented state.
    pub fn reduce_to_first_order(&self) -> ReducedField<'_> {
        ReducedField::new(self.accel.as_ref(), &self.accel_params)
    }

    /// `z(t0) = (x0, g(x0))` for a batched `[N,C,H,W]` position.
    pub fn initial_state(&self, x0: &Tensor) -> Result<AugmentedState> {
        let v0 = match &self.init_velocity {
            Some(g) => eval_field(g.as_ref(), &[x0], self.span.t0, &self.init_params)?,
            None => Tensor::zeros_like(x0),
        };
        AugmentedState::second_order(x0.clone(), v0)
    }

    /// Final augmented state `z(t1)`.
    pub fn forward_state(&self, x0: &Tensor) -> Result<AugmentedState> {
        let x0 = x0.clone().as_batch()?;
        let z0 = self.initial_state(&x0)?;
        integrate(&mut self.reduce_to_first_order(), z0, &self.span, self.solver)
    }

    /// Position at `t1`. Accepts `[C,H,W]` or `[N,C,H,W]` and returns the same rank.
    pub fn forward(&self, x0: &Tensor) -> Result<Tensor> {
        if !x0.is_finite() {
            return Err(Error::NonFinite("block input".into()));
        }
        let z1 = self.forward_state(x0)?;
        match_rank(z1.into_position(), x0.shape())
    }

    /// Gradients of a loss `L(x(t1))` given `upstream = ∂L/∂x(t1)`, via the
    /// adjoint system. Recomputes `z(t1)` from `x0`.
    pub fn adjoint_backward(&self, x0: &Tensor, upstream: &Tensor) -> Result<AdjointGrads> {
        let z1 = self.forward_state(x0)?;
        self.adjoint_from_final(x0, z1, upstream)
    }

    /// As [`Self::adjoint_backward`] with a known final state.
    pub fn adjoint_from_final(&self, x0: &Tensor, z1: AugmentedState, upstream: &Tensor) -> Result<AdjointGrads> {
        let rank = x0.shape().to_vec();
        let x0 = x0.clone().as_batch()?;
        let upstream = upstream.clone().as_batch()?;
        x0.same_shape(&upstream, "adjoint_backward")?;
        x0.same_shape(z1.position(), "adjoint_backward")?;
        let a1 = AugmentedState::second_order(upstream, Tensor::zeros_like(&x0))?;
        let sweep = adjoint::sweep(
            self.accel.as_ref(),
            &self.accel_params,
            &self.span,
            self.solver,
            z1,
            a1,
        )?;
        let mut parts = sweep.adjoint.parts.into_iter();
        let mut grad_x0 = parts.next().expect("position adjoint");
        let grad_v0 = parts.next().expect("velocity adjoint");
        let grad_init = match &self.init_velocity {
            Some(g) => {
                let vjp = field_vjp(g.as_ref(), &[&x0], self.span.t0, &self.init_params, &grad_v0)?;
                grad_x0.axpy(1.0, &vjp.input_grads[0]);
                vjp.param_grads
            }
            None => Vec::new(),
        };
        Ok(AdjointGrads {
            grad_x0: match_rank(grad_x0, &rank)?,
            grad_field: sweep.param_grads,
            grad_init,
            stats: sweep.stats,
        })
    }

    pub fn num_params(&self) -> usize {
        self.accel_params
            .iter()
            .chain(&self.init_params)
            .map(Tensor::numel)
            .sum()
    }

    /// Record the block as one node on `graph`. `params` holds graph leaves
    /// for `accel_params` followed by `init_params`.
    pub fn record(&self, graph: &mut Graph, x: Var, params: &[Var]) -> Result<Var> {
        op::record_dynamic(self, graph, x, params)
    }
}

/// First-order neural-ODE block `x' = f(x, t; θ)`.
#[derive(Clone, Debug)]
pub struct FirstOrderBlock {
    pub field: Arc<dyn Field>,
    pub params: Vec<Tensor>,
    pub span: IntegrationConfig,
    pub solver: SolverKind,
}

impl FirstOrderBlock {
    pub fn new(
        field: Arc<dyn Field>,
        params: Vec<Tensor>,
        span: IntegrationConfig,
        solver: SolverKind,
    ) -> Result<Self> {
        check_params(field.as_ref(), &params)?;
        span.validate()?;
        Ok(FirstOrderBlock {
            field,
            params,
            span,
            solver,
        })
    }

    /// Convolutional velocity field starting at zero (identity block).
    pub fn conv(
        channels: usize,
        span: IntegrationConfig,
        solver: SolverKind,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self> {
        let field = ConvField::velocity(channels);
        let params = field.init_params(rng);
        Self::new(Arc::new(field), params, span, solver)
    }

    pub fn reduce_to_first_order(&self) -> ReducedField<'_> {
        ReducedField::new(self.field.as_ref(), &self.params)
    }

    pub fn forward_state(&self, x0: &Tensor) -> Result<AugmentedState> {
        let z0 = AugmentedState::new(vec![x0.clone().as_batch()?])?;
        integrate(&mut self.reduce_to_first_order(), z0, &self.span, self.solver)
    }

    pub fn forward(&self, x0: &Tensor) -> Result<Tensor> {
        if !x0.is_finite() {
            return Err(Error::NonFinite("block input".into()));
        }
        let z1 = self.forward_state(x0)?;
        match_rank(z1.into_position(), x0.shape())
    }

    pub fn adjoint_backward(&self, x0: &Tensor, upstream: &Tensor) -> Result<AdjointGrads> {
        let z1 = self.forward_state(x0)?;
        self.adjoint_from_final(x0, z1, upstream)
    }

    pub fn adjoint_from_final(&self, x0: &Tensor, z1: AugmentedState, upstream: &Tensor) -> Result<AdjointGrads> {
        let rank = x0.shape().to_vec();
        let upstream = upstream.clone().as_batch()?;
        upstream.same_shape(z1.position(), "adjoint_backward")?;
        let a1 = AugmentedState::new(vec![upstream])?;
        let sweep = adjoint::sweep(
            self.field.as_ref(),
            &self.params,
            &self.span,
            self.solver,
            z1,
            a1,
        )?;
        Ok(AdjointGrads {
            grad_x0: match_rank(sweep.adjoint.into_position(), &rank)?,
            grad_field: sweep.param_grads,
            grad_init: Vec::new(),
            stats: sweep.stats,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn record(&self, graph: &mut Graph, x: Var, params: &[Var]) -> Result<Var> {
        op::record_first_order(self, graph, x, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::integrate;

    fn harmonic(steps: usize, solver: SolverKind) -> DynamicBlock {
        DynamicBlock::new(
            Arc::new(LinearField { arity: 2 }),
            LinearField::coefficients(&[-1.0, 0.0]),
            None,
            Vec::new(),
            IntegrationConfig::new(0.0, std::f64::consts::FRAC_PI_2, steps).unwrap(),
            solver,
        )
        .unwrap()
    }

    #[test]
    fn harmonic_oscillator_quarter_period() {
        let block = harmonic(100, SolverKind::RK4);
        let z1 = block.forward_state(&Tensor::ones([1, 1, 1])).unwrap();
        assert!(z1.position().data()[0].abs() < 1e-6);
        assert!((z1.velocity().unwrap().data()[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_block_is_identity() {
        let block = DynamicBlock::new(
            Arc::new(ZeroField),
            vec![],
            None,
            vec![],
            IntegrationConfig::new(0.0, 3.0, 5).unwrap(),
            SolverKind::RK4,
        )
        .unwrap();
        let x0 = Tensor::new([1, 2, 2], vec![0.1, -0.2, 0.3, 4.0]).unwrap();
        assert_eq!(block.forward(&x0).unwrap(), x0);
    }

    #[test]
    fn constant_velocity_drift() {
        let c = 0.75;
        let g = ConvMap { channels: 1 };
        let block = DynamicBlock::new(
            Arc::new(ZeroField),
            vec![],
            Some(Arc::new(g)),
            vec![Tensor::zeros([1, 1, 3, 3]), Tensor::full([1], c)],
            IntegrationConfig::new(0.5, 2.5, 4).unwrap(),
            SolverKind::Euler,
        )
        .unwrap();
        let x0 = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = block.forward(&x0).unwrap();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert!((o - (x + 2.0 * c)).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_matches_manual_reduction() {
        let mut rng = rand::thread_rng();
        let block = DynamicBlock::conv(2, IntegrationConfig::unit(6).unwrap(), SolverKind::ABM2, &mut rng)
            .unwrap();
        let x0 = Tensor::randn([1, 2, 4, 4], 1.0, &mut rng);
        let z0 = block.initial_state(&x0).unwrap();
        let manual = integrate(&mut block.reduce_to_first_order(), z0, &block.span, block.solver).unwrap();
        assert_eq!(block.forward(&x0).unwrap(), manual.into_position());
    }

    #[test]
    fn mismatched_params_rejected() {
        let r = DynamicBlock::new(
            Arc::new(LinearField { arity: 2 }),
            LinearField::coefficients(&[1.0]),
            None,
            vec![],
            IntegrationConfig::unit(1).unwrap(),
            SolverKind::RK4,
        );
        assert!(r.is_err());
    }

    #[test]
    fn first_order_decay() {
        let block = FirstOrderBlock::new(
            Arc::new(LinearField { arity: 1 }),
            LinearField::coefficients(&[-1.0]),
            IntegrationConfig::unit(50).unwrap(),
            SolverKind::RK4,
        )
        .unwrap();
        let out = block.forward(&Tensor::full([1, 1, 1], 2.0)).unwrap();
        assert!((out.data()[0] - 2.0 * (-1.0f64).exp()).abs() < 1e-8);
    }
}
