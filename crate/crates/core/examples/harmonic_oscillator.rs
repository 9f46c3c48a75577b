//! A second-order block with x'' = -x and zero initial velocity traces cos(t).

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use continuum::node::LinearField;
use continuum::{DynamicBlock, IntegrationConfig, SolverKind, Tensor};

fn main() -> continuum::Result<()> {
    let x0 = Tensor::new([1, 1, 1], vec![1.0])?;
    for solver in SolverKind::ALL {
        let block = DynamicBlock::new(
            Arc::new(LinearField { arity: 2 }),
            LinearField::coefficients(&[-1.0, 0.0]),
            None,
            vec![],
            IntegrationConfig::new(0.0, FRAC_PI_2, 100)?,
            solver,
        )?;
        let z = block.forward_state(&x0)?;
        let x = z.position().data()[0];
        let v = z.velocity().unwrap().data()[0];
        println!("{solver:<6} x(pi/2) = {x:+.3e}  v(pi/2) = {v:+.9}");
    }
    Ok(())
}
