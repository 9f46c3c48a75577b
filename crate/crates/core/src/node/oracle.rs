//! Discretise-then-differentiate reference gradients.
//!
//! Every solver stage is recorded on one [`Graph`] and differentiated by
//! ordinary reverse mode. Memory grows linearly with the step count; this
//! path exists to check the adjoint, not to train with.

use super::{DynamicBlock, Field, FirstOrderBlock};
use crate::error::Result;
use crate::solvers::{integrate, OdeSystem};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct StoredGrads {
    pub grad_x0: Tensor,
    pub grad_field: Vec<Tensor>,
    pub grad_init: Vec<Tensor>,
    /// Number of graph nodes kept alive for the backward sweep.
    pub retained_nodes: usize,
}

struct GraphSystem<'g> {
    graph: &'g mut Graph,
    field: &'g dyn Field,
    params: Vec<Var>,
}

impl OdeSystem for GraphSystem<'_> {
    type State = Vec<Var>;

    fn derivative(&mut self, t: f64, z: &Vec<Var>) -> Result<Vec<Var>> {
        let top = self.field.apply(self.graph, z, t, &self.params)?;
        let mut out = z[1..].to_vec();
        out.push(top);
        Ok(out)
    }

    fn combine(&mut self, base: &Vec<Var>, terms: &[(f64, &Vec<Var>)]) -> Result<Vec<Var>> {
        (0..base.len())
            .map(|i| {
                let ts: Vec<(f64, Var)> = terms.iter().map(|(c, s)| (*c, s[i])).collect();
                self.graph.lincomb(base[i], &ts)
            })
            .collect()
    }

    fn is_finite(&self, z: &Vec<Var>) -> bool {
        z.iter().all(|v| self.graph.value(*v).is_finite())
    }
}

fn grads_for(grads: &crate::tensor::Gradients, vars: &[Var], like: &[Tensor]) -> Vec<Tensor> {
    vars.iter()
        .zip(like)
        .map(|(v, p)| grads.get_or_zeros(*v, p))
        .collect()
}

/// Reference gradients of `⟨upstream, x(t1)⟩` for a second-order block.
pub fn stored_backprop(block: &DynamicBlock, x0: &Tensor, upstream: &Tensor) -> Result<StoredGrads> {
    let rank = x0.shape().to_vec();
    let x0b = x0.clone().as_batch()?;
    let mut g = Graph::new();
    let x = g.param(x0b.clone());
    let fp: Vec<Var> = block.accel_params.iter().map(|p| g.param(p.clone())).collect();
    let gp: Vec<Var> = block.init_params.iter().map(|p| g.param(p.clone())).collect();
    let v0 = match &block.init_velocity {
        Some(init) => init.apply(&mut g, &[x], block.span.t0, &gp)?,
        None => g.constant(Tensor::zeros_like(&x0b)),
    };
    let z1 = {
        let mut sys = GraphSystem {
            graph: &mut g,
            field: block.accel.as_ref(),
            params: fp.clone(),
        };
        integrate(&mut sys, vec![x, v0], &block.span, block.solver)?
    };
    let cot = upstream.clone().reshape(g.value(z1[0]).shape().to_vec())?;
    let grads = g.vjp(z1[0], cot)?;
    Ok(StoredGrads {
        grad_x0: grads.get_or_zeros(x, &x0b).reshape(rank)?,
        grad_field: grads_for(&grads, &fp, &block.accel_params),
        grad_init: grads_for(&grads, &gp, &block.init_params),
        retained_nodes: g.len(),
    })
}

/// Reference gradients for a first-order block.
pub fn stored_backprop_first_order(block: &FirstOrderBlock, x0: &Tensor, upstream: &Tensor) -> Result<StoredGrads> {
    let rank = x0.shape().to_vec();
    let x0b = x0.clone().as_batch()?;
    let mut g = Graph::new();
    let x = g.param(x0b.clone());
    let fp: Vec<Var> = block.params.iter().map(|p| g.param(p.clone())).collect();
    let z1 = {
        let mut sys = GraphSystem {
            graph: &mut g,
            field: block.field.as_ref(),
            params: fp.clone(),
        };
        integrate(&mut sys, vec![x], &block.span, block.solver)?
    };
    let cot = upstream.clone().reshape(g.value(z1[0]).shape().to_vec())?;
    let grads = g.vjp(z1[0], cot)?;
    Ok(StoredGrads {
        grad_x0: grads.get_or_zeros(x, &x0b).reshape(rank)?,
        grad_field: grads_for(&grads, &fp, &block.params),
        grad_init: Vec::new(),
        retained_nodes: g.len(),
    })
}
