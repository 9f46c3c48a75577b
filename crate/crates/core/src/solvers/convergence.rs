//! Empirical global-error measurement and order fitting.

use std::fmt::Write as _;
use std::sync::Arc;

use super::{integrate, IntegrationConfig, SolverKind, VectorField};
use crate::error::{Error, Result};

type Rhs = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
type Exact = Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>;

/// An initial-value problem with an optional closed-form solution.
#[derive(Clone)]
pub struct TestProblem {
    pub name: String,
    pub field: Rhs,
    pub exact: Option<Exact>,
    /// Stiffness coefficient for problems of the form `x' = λx + f(t)`.
    pub lambda: Option<f64>,
    pub x0: Vec<f64>,
    pub t0: f64,
    pub t1: f64,
}

impl std::fmt::Debug for TestProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TestProblem")
            .field("name", &self.name)
            .field("lambda", &self.lambda)
            .field("x0", &self.x0)
            .field("span", &(self.t0, self.t1))
            .field("exact", &self.exact.is_some())
            .finish()
    }
}

impl TestProblem {
    /// `x' = -x`, `x(0) = 1` on `[0, 1]`; exact `e^{-t}`.
    pub fn decay() -> Self {
        TestProblem {
            name: "decay".into(),
            field: Arc::new(|_t, x| x.iter().map(|v| -v).collect()),
            exact: Some(Arc::new(|t| vec![(-t).exp()])),
            lambda: Some(-1.0),
            x0: vec![1.0],
            t0: 0.0,
            t1: 1.0,
        }
    }

    /// `x' = λx + sin(ωt)`, `x(0) = 1` on `[0, 1]`: a linear part plus a
    /// state-independent forcing term, with λ = -2 and ω = 3.
    pub fn forced_linear() -> Self {
        Self::forced_linear_with(-2.0, 3.0)
    }

    pub fn forced_linear_with(lambda: f64, omega: f64) -> Self {
        // particular solution A·sin ωt + B·cos ωt
        let denom = omega * omega + lambda * lambda;
        let a = -lambda / denom;
        let b = -omega / denom;
        let c = 1.0 - b;
        TestProblem {
            name: "forced_linear".into(),
            field: Arc::new(move |t, x| vec![lambda * x[0] + (omega * t).sin()]),
            exact: Some(Arc::new(move |t| {
                vec![c * (lambda * t).exp() + a * (omega * t).sin() + b * (omega * t).cos()]
            })),
            lambda: Some(lambda),
            x0: vec![1.0],
            t0: 0.0,
            t1: 1.0,
        }
    }

    /// The two problems used by the solver benchmark.
    pub fn canonical() -> Vec<TestProblem> {
        vec![Self::decay(), Self::forced_linear()]
    }

    /// Integrate with `steps` steps of the given solver and return the final state.
    pub fn solve(&self, kind: SolverKind, steps: usize) -> Result<Vec<f64>> {
        let cfg = IntegrationConfig::new(self.t0, self.t1, steps)?;
        let field = self.field.clone();
        let mut sys = VectorField(move |t: f64, x: &[f64]| field(t, x));
        integrate(&mut sys, self.x0.clone(), &cfg, kind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalErrorReport {
    pub h_values: Vec<f64>,
    pub errors: Vec<f64>,
    pub fitted_order: f64,
}

impl GlobalErrorReport {
    /// `h,error` rows followed by a `# fitted_order=` trailer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("h,error\n");
        for (h, e) in self.h_values.iter().zip(&self.errors) {
            let _ = writeln!(out, "{h},{e}");
        }
        let _ = writeln!(out, "# fitted_order={}", self.fitted_order);
        out
    }
}

/// Least-squares slope of `ln e` against `ln h`.
pub fn fit_order(h_values: &[f64], errors: &[f64]) -> Result<f64> {
    if h_values.len() != errors.len() || h_values.len() < 2 {
        return Err(Error::Config(
            "order fit needs at least two (h, error) pairs".into(),
        ));
    }
    if errors.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::NonFinite(
            "order fit needs strictly positive finite errors".into(),
        ));
    }
    let xs: Vec<f64> = h_values.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Measure the global error at the final time for each step size and fit
/// the convergence order.
pub fn estimate_convergence_order(
    problem: &TestProblem,
    kind: SolverKind,
    h_values: &[f64],
) -> Result<GlobalErrorReport> {
    let exact = problem.exact.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "problem `{}` has no closed-form solution",
            problem.name
        ))
    })?;
    if h_values.len() < 4 {
        return Err(Error::Config("need at least four step sizes".into()));
    }
    if h_values.windows(2).any(|w| !(w[1] < w[0])) || h_values.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::Config(
            "step sizes must be positive and strictly decreasing".into(),
        ));
    }
    let span_ratio = h_values[0] / h_values[h_values.len() - 1];
    if span_ratio < 10.0 {
        return Err(Error::Config(format!(
            "step sizes must span at least a factor of 10, got {span_ratio}"
        )));
    }
    let length = problem.t1 - problem.t0;
    let reference = exact(problem.t1);
    let mut errors = Vec::with_capacity(h_values.len());
    for &h in h_values {
        let steps = (length / h).round();
        if steps < 1.0 || ((steps * h - length).abs() > 1e-9 * length) {
            return Err(Error::Config(format!(
                "h = {h} does not divide the span {length}"
            )));
        }
        let xn = problem.solve(kind, steps as usize)?;
        let e = xn
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        errors.push(e);
    }
    let fitted_order = fit_order(h_values, &errors)?;
    Ok(GlobalErrorReport {
        h_values: h_values.to_vec(),
        errors,
        fitted_order,
    })
}
