//! Continuous adjoint for m-th order blocks.
//!
//! With `z = (x₁, …, x_m)` and `F(z) = (x₂, …, x_m, f(z, t; θ))`, the adjoint
//! `a = ∂L/∂z` obeys
//!
//! ```text
//! a_j' = −(a_{j−1} + a_mᵀ ∂f/∂x_j)      (a_0 ≡ 0)
//! acc' = −a_mᵀ ∂f/∂θ
//! ```
//!
//! Both are integrated from `t1` back to `t0` together with `z` itself,
//! with the forward solver and step count. Only the current triple
//! `(z, a, acc)` and the solver's stage buffers are alive at any time.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::field::{field_vjp, Field};
use super::AugmentedState;
use crate::error::Result;
use crate::solvers::{integrate_between, IntegrationConfig, OdeSystem, SolverKind};
use crate::tensor::Tensor;

#[derive(Debug, Default)]
struct Counters {
    live: AtomicUsize,
    peak: AtomicUsize,
}

/// Counts how many adjoint-system states are alive at once.
#[derive(Clone, Debug, Default)]
pub struct RetentionMeter {
    counters: Arc<Counters>,
}

impl RetentionMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn live(&self) -> usize {
        self.counters.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.counters.peak.load(Ordering::SeqCst)
    }

    fn token(&self) -> Token {
        let live = self.counters.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.counters.peak.fetch_max(live, Ordering::SeqCst);
        Token {
            meter: self.clone(),
        }
    }
}

#[derive(Debug)]
struct Token {
    meter: RetentionMeter,
}

impl Clone for Token {
    fn clone(&self) -> Self {
        self.meter.token()
    }
}

impl Drop for Token {
    fn drop(&mut self) {
        self.meter.counters.live.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AdjointStats {
    /// Largest number of `(z, a, acc)` states alive simultaneously.
    pub peak_retained_states: usize,
    pub field_evaluations: usize,
}

/// Output of a block's adjoint pass.
#[derive(Clone, Debug)]
pub struct AdjointGrads {
    pub grad_x0: Tensor,
    /// Gradient w.r.t. the field parameters θf.
    pub grad_field: Vec<Tensor>,
    /// Gradient w.r.t. the initial-velocity parameters θg (empty when `g` is parameter-free).
    pub grad_init: Vec<Tensor>,
    pub stats: AdjointStats,
}

#[derive(Clone, Debug)]
struct AdjointState {
    z: AugmentedState,
    a: AugmentedState,
    acc: Vec<Tensor>,
    _token: Token,
}

struct AdjointSystem<'a> {
    field: &'a dyn Field,
    params: &'a [Tensor],
    meter: RetentionMeter,
    evaluations: usize,
}

impl OdeSystem for AdjointSystem<'_> {
    type State = AdjointState;

    fn derivative(&mut self, t: f64, s: &AdjointState) -> Result<AdjointState> {
        self.evaluations += 1;
        let m = s.z.order();
        let inputs: Vec<&Tensor> = s.z.parts.iter().collect();
        let vjp = field_vjp(self.field, &inputs, t, self.params, &s.a.parts[m - 1])?;

        let mut dz: Vec<Tensor> = s.z.parts[1..].to_vec();
        dz.push(vjp.value);

        let da = vjp
            .input_grads
            .into_iter()
            .enumerate()
            .map(|(j, g)| {
                let mut d = g.scale(-1.0);
                if j > 0 {
                    d.axpy(-1.0, &s.a.parts[j - 1]);
                }
                d
            })
            .collect();
        let dacc = vjp.param_grads.iter().map(|g| g.scale(-1.0)).collect();
        Ok(AdjointState {
            z: AugmentedState { parts: dz },
            a: AugmentedState { parts: da },
            acc: dacc,
            _token: self.meter.token(),
        })
    }

    fn combine(&mut self, base: &AdjointState, terms: &[(f64, &AdjointState)]) -> Result<AdjointState> {
        let zs: Vec<(f64, &AugmentedState)> = terms.iter().map(|(c, s)| (*c, &s.z)).collect();
        let as_: Vec<(f64, &AugmentedState)> = terms.iter().map(|(c, s)| (*c, &s.a)).collect();
        let acc = (0..base.acc.len())
            .map(|i| {
                let ts: Vec<(f64, &Tensor)> = terms.iter().map(|(c, s)| (*c, &s.acc[i])).collect();
                Tensor::lincomb(&base.acc[i], &ts)
            })
            .collect();
        Ok(AdjointState {
            z: AugmentedState::lincomb(&base.z, &zs),
            a: AugmentedState::lincomb(&base.a, &as_),
            acc,
            _token: self.meter.token(),
        })
    }

    fn is_finite(&self, s: &AdjointState) -> bool {
        s.z.is_finite() && s.a.is_finite() && s.acc.iter().all(Tensor::is_finite)
    }
}

pub(crate) struct Sweep {
    /// `∂L/∂z(t0)`
    pub adjoint: AugmentedState,
    pub param_grads: Vec<Tensor>,
    pub stats: AdjointStats,
}

/// Integrate `(z, a, acc)` from `(z1, a1, 0)` at `t1` back to `t0`.
pub(crate) fn sweep(
    field: &dyn Field,
    params: &[Tensor],
    span: &IntegrationConfig,
    solver: SolverKind,
    z1: AugmentedState,
    a1: AugmentedState,
) -> Result<Sweep> {
    span.validate()?;
    let meter = RetentionMeter::new();
    let mut system = AdjointSystem {
        field,
        params,
        meter: meter.clone(),
        evaluations: 0,
    };
    let start = AdjointState {
        z: z1,
        a: a1,
        acc: params.iter().map(Tensor::zeros_like).collect(),
        _token: meter.token(),
    };
    let end = integrate_between(&mut system, start, span.t1, span.t0, span.steps, solver)?;
    let stats = AdjointStats {
        peak_retained_states: meter.peak(),
        field_evaluations: system.evaluations,
    };
    Ok(Sweep {
        adjoint: end.a.clone(),
        param_grads: end.acc.clone(),
        stats,
    })
}
