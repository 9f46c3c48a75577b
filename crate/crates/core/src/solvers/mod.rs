//! Fixed-step initial-value-problem integrators.
//!
//! Every integrator is written against [`OdeSystem`], so the same stepping
//! code drives plain vector problems, tensor-valued neural fields, the
//! augmented adjoint system and graph-recorded trajectories.

mod convergence;
mod lipschitz;

pub use convergence::{estimate_convergence_order, fit_order, GlobalErrorReport, TestProblem};
pub use lipschitz::{estimate_lipschitz, BoundingBox};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SolverKind {
    #[serde(rename = "euler", alias = "Euler")]
    Euler,
    /// Two-step explicit Adams-Bashforth.
    #[serde(rename = "ab2", alias = "AB2")]
    AB2,
    /// Adams-Bashforth predictor with one trapezoidal Adams-Moulton corrector (PECE).
    #[serde(rename = "abm2", alias = "ABM2")]
    ABM2,
    #[serde(rename = "rk4", alias = "RK4")]
    RK4,
}

impl SolverKind {
    pub const ALL: [SolverKind; 4] = [
        SolverKind::Euler,
        SolverKind::AB2,
        SolverKind::ABM2,
        SolverKind::RK4,
    ];

    /// Nominal global-error order.
    pub fn order(self) -> u32 {
        match self {
            SolverKind::Euler => 1,
            SolverKind::AB2 | SolverKind::ABM2 => 2,
            SolverKind::RK4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Euler => "euler",
            SolverKind::AB2 => "ab2",
            SolverKind::ABM2 => "abm2",
            SolverKind::RK4 => "rk4",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(SolverKind::Euler),
            "ab2" | "ab" => Ok(SolverKind::AB2),
            "abm2" | "abm" => Ok(SolverKind::ABM2),
            "rk4" => Ok(SolverKind::RK4),
            other => Err(Error::Config(format!("unknown solver `{other}`"))),
        }
    }
}

/// Time span and step count; the step size is `(t1 - t0) / steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl IntegrationConfig {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self> {
        let cfg = IntegrationConfig { t0, t1, steps };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The unit horizon `[0, 1]` used by every network block.
    pub fn unit(steps: usize) -> Result<Self> {
        Self::new(0.0, 1.0, steps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0.is_finite() && self.t1.is_finite() && self.t1 > self.t0) {
            return Err(Error::Config(format!(
                "integration span needs t1 > t0, got [{}, {}]",
                self.t0, self.t1
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("integration needs at least one step".into()));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }
}

/// A first-order system `x' = f(t, x)` over an arbitrary state type.
///
/// `combine` supplies the vector-space structure the integrators need.
pub trait OdeSystem {
    type State: Clone;

    fn derivative(&mut self, t: f64, state: &Self::State) -> Result<Self::State>;

    /// `base + Σ cᵢ·termᵢ`
    fn combine(&mut self, base: &Self::State, terms: &[(f64, &Self::State)]) -> Result<Self::State>;

    fn is_finite(&self, state: &Self::State) -> bool;
}

/// Adapter turning a closure on `&[f64]` into an [`OdeSystem`].
pub struct VectorField<F>(pub F);

impl<F> OdeSystem for VectorField<F>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    type State = Vec<f64>;

    fn derivative(&mut self, t: f64, state: &Vec<f64>) -> Result<Vec<f64>> {
        let d = (self.0)(t, state);
        if d.len() != state.len() {
            return Err(Error::shape(
                "vector field",
                format!("state has {} entries, derivative {}", state.len(), d.len()),
            ));
        }
        Ok(d)
    }

    fn combine(&mut self, base: &Vec<f64>, terms: &[(f64, &Vec<f64>)]) -> Result<Vec<f64>> {
        let mut out = base.clone();
        for (c, t) in terms {
            for (o, v) in out.iter_mut().zip(t.iter()) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    fn is_finite(&self, state: &Vec<f64>) -> bool {
        state.iter().all(|v| v.is_finite())
    }
}

/// Integrate over `cfg` and return the final state.
pub fn integrate<S: OdeSystem>(
    system: &mut S,
    x0: S::State,
    cfg: &IntegrationConfig,
    kind: SolverKind,
) -> Result<S::State> {
    cfg.validate()?;
    integrate_between(system, x0, cfg.t0, cfg.t1, cfg.steps, kind)
}

/// Integrate over `cfg` and return all `steps + 1` states, `x0` first.
pub fn integrate_trajectory<S: OdeSystem>(
    system: &mut S,
    x0: S::State,
    cfg: &IntegrationConfig,
    kind: SolverKind,
) -> Result<Vec<S::State>> {
    cfg.validate()?;
    let mut states = Vec::with_capacity(cfg.steps + 1);
    states.push(x0.clone());
    run(system, x0, cfg.t0, cfg.t1, cfg.steps, kind, &mut |s| {
        states.push(s.clone())
    })?;
    Ok(states)
}

/// Integrate from `t_start` to `t_end` in `steps` equal steps. `t_end` may
/// lie before `t_start`, in which case the step size is negative.
pub fn integrate_between<S: OdeSystem>(
    system: &mut S,
    x0: S::State,
    t_start: f64,
    t_end: f64,
    steps: usize,
    kind: SolverKind,
) -> Result<S::State> {
    run(system, x0, t_start, t_end, steps, kind, &mut |_| {})
}

fn rk4_step<S: OdeSystem>(
    system: &mut S,
    t: f64,
    h: f64,
    x: &S::State,
    k1: S::State,
) -> Result<S::State> {
    let half = 0.5 * h;
    let x2 = system.combine(x, &[(half, &k1)])?;
    let k2 = system.derivative(t + half, &x2)?;
    drop(x2);
    let x3 = system.combine(x, &[(half, &k2)])?;
    let k3 = system.derivative(t + half, &x3)?;
    drop(x3);
    let x4 = system.combine(x, &[(h, &k3)])?;
    let k4 = system.derivative(t + h, &x4)?;
    drop(x4);
    let sixth = h / 6.0;
    system.combine(
        x,
        &[
            (sixth, &k1),
            (2.0 * sixth, &k2),
            (2.0 * sixth, &k3),
            (sixth, &k4),
        ],
    )
}

fn run<S: OdeSystem>(
    system: &mut S,
    x0: S::State,
    t_start: f64,
    t_end: f64,
    steps: usize,
    kind: SolverKind,
    observe: &mut dyn FnMut(&S::State),
) -> Result<S::State> {
    if steps == 0 {
        return Err(Error::Config("integration needs at least one step".into()));
    }
    if !system.is_finite(&x0) {
        return Err(Error::Divergence { step: 0, t: t_start });
    }
    let h = (t_end - t_start) / steps as f64;
    let mut x = x0;
    // f(t_{n-1}, x_{n-1}) for the two-step methods
    let mut previous: Option<S::State> = None;
    for n in 0..steps {
        let t = t_start + n as f64 * h;
        let next = match kind {
            SolverKind::Euler => {
                let k = system.derivative(t, &x)?;
                system.combine(&x, &[(h, &k)])?
            }
            SolverKind::RK4 => {
                let k1 = system.derivative(t, &x)?;
                rk4_step(system, t, h, &x, k1)?
            }
            SolverKind::AB2 | SolverKind::ABM2 => {
                let current = system.derivative(t, &x)?;
                let next = match previous.take() {
                    // bootstrap with a single RK4 step
                    None => rk4_step(system, t, h, &x, current.clone())?,
                    Some(prev) => {
                        let predicted =
                            system.combine(&x, &[(1.5 * h, &current), (-0.5 * h, &prev)])?;
                        drop(prev);
                        if kind == SolverKind::ABM2 {
                            let fp = system.derivative(t + h, &predicted)?;
                            drop(predicted);
                            system.combine(&x, &[(0.5 * h, &fp), (0.5 * h, &current)])?
                        } else {
                            predicted
                        }
                    }
                };
                previous = Some(current);
                next
            }
        };
        if !system.is_finite(&next) {
            return Err(Error::Divergence {
                step: n + 1,
                t: t + h,
            });
        }
        observe(&next);
        x = next;
    }
    Ok(x)
}
