//! Fitted global-error orders of the four fixed-step solvers.
//!
//! cargo run --release --example solver_orders

use continuum::solvers::{estimate_convergence_order, TestProblem};
use continuum::SolverKind;

fn main() -> continuum::Result<()> {
    let h: Vec<f64> = (3..=9).map(|k| 2f64.powi(-k)).collect();
    println!("{:<6} {:<14} {:>8} {:>12}", "solver", "problem", "order", "err(h=2^-9)");
    for problem in TestProblem::canonical() {
        for kind in SolverKind::ALL {
            let r = estimate_convergence_order(&problem, kind, &h)?;
            println!(
                "{:<6} {:<14} {:>8.3} {:>12.3e}",
                kind,
                problem.name,
                r.fitted_order,
                r.errors.last().unwrap()
            );
        }
    }
    Ok(())
}
