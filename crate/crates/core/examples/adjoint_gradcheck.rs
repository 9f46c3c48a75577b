//! Adjoint gradients of a random conv block against backprop through the
//! stored solver trajectory, and the memory each approach keeps alive.

use std::sync::Arc;

use continuum::gradcheck::relative_error_tensors;
use continuum::node::oracle::stored_backprop;
use continuum::node::{random_params, ConvField, ConvMap};
use continuum::{DynamicBlock, IntegrationConfig, SolverKind, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> continuum::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let accel = ConvField::acceleration(2);
    let g = ConvMap { channels: 2 };
    let ap = random_params(&accel, 0.2, &mut rng);
    let gp = random_params(&g, 0.2, &mut rng);
    let x0 = Tensor::randn([2, 8, 8], 1.0, &mut rng);
    let up = Tensor::randn([2, 8, 8], 1.0, &mut rng);

    println!("{:>6} {:>12} {:>14} {:>14}", "steps", "rel. gap", "adjoint states", "graph nodes");
    for steps in [10, 25, 50, 100, 200] {
        let block = DynamicBlock::new(
            Arc::new(accel.clone()),
            ap.clone(),
            Some(Arc::new(g.clone())),
            gp.clone(),
            IntegrationConfig::unit(steps)?,
            SolverKind::RK4,
        )?;
        let adj = block.adjoint_backward(&x0, &up)?;
        let oracle = stored_backprop(&block, &x0, &up)?;
        let mut a = vec![adj.grad_x0];
        a.extend(adj.grad_field);
        a.extend(adj.grad_init);
        let mut b = vec![oracle.grad_x0];
        b.extend(oracle.grad_field);
        b.extend(oracle.grad_init);
        println!(
            "{steps:>6} {:>12.3e} {:>14} {:>14}",
            relative_error_tensors(&a, &b),
            adj.stats.peak_retained_states,
            oracle.retained_nodes
        );
    }
    Ok(())
}
