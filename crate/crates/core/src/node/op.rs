//! Graph nodes for ODE blocks. The forward pass keeps only the final
//! augmented state; the backward rule runs the adjoint sweep.

use std::sync::Arc;

use super::{AugmentedState, DynamicBlock, Field, FirstOrderBlock};
use crate::error::{Error, Result};
use crate::solvers::{IntegrationConfig, SolverKind};
use crate::tensor::{CustomOp, Graph, Tensor, Var};

fn check_param_vars(graph: &Graph, vars: &[Var], expected: &[&Tensor]) -> Result<()> {
    if vars.len() != expected.len() {
        return Err(Error::shape(
            "ode block",
            format!("{} parameter vars for {} parameters", vars.len(), expected.len()),
        ));
    }
    for (v, p) in vars.iter().zip(expected) {
        graph.value(*v).same_shape(p, "ode block")?;
    }
    Ok(())
}

struct DynamicBlockOp {
    accel: Arc<dyn Field>,
    init_velocity: Option<Arc<dyn Field>>,
    n_accel: usize,
    span: IntegrationConfig,
    solver: SolverKind,
    final_state: AugmentedState,
}

impl CustomOp for DynamicBlockOp {
    fn name(&self) -> &'static str {
        "dynamic_block"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (x0, params) = inputs.split_first().expect("block input");
        let block = DynamicBlock {
            accel: self.accel.clone(),
            accel_params: params[..self.n_accel].iter().map(|t| (*t).clone()).collect(),
            init_velocity: self.init_velocity.clone(),
            init_params: params[self.n_accel..].iter().map(|t| (*t).clone()).collect(),
            span: self.span,
            solver: self.solver,
        };
        let grads = block.adjoint_from_final(x0, self.final_state.clone(), grad_output)?;
        let mut out = vec![Some(grads.grad_x0)];
        out.extend(grads.grad_field.into_iter().map(Some));
        out.extend(grads.grad_init.into_iter().map(Some));
        Ok(out)
    }
}

pub(super) fn record_dynamic(block: &DynamicBlock, graph: &mut Graph, x: Var, params: &[Var]) -> Result<Var> {
    let expected: Vec<&Tensor> = block.accel_params.iter().chain(&block.init_params).collect();
    check_param_vars(graph, params, &expected)?;
    let x0 = graph.value(x).clone();
    let z1 = block.forward_state(&x0)?;
    let out = z1.position().clone().reshape(x0.shape().to_vec())?;
    let op = DynamicBlockOp {
        accel: block.accel.clone(),
        init_velocity: block.init_velocity.clone(),
        n_accel: block.accel_params.len(),
        span: block.span,
        solver: block.solver,
        final_state: z1,
    };
    let mut inputs = vec![x];
    inputs.extend_from_slice(params);
    Ok(graph.custom(&inputs, out, Box::new(op)))
}

struct FirstOrderOp {
    field: Arc<dyn Field>,
    span: IntegrationConfig,
    solver: SolverKind,
    final_state: AugmentedState,
}

impl CustomOp for FirstOrderOp {
    fn name(&self) -> &'static str {
        "first_order_block"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (x0, params) = inputs.split_first().expect("block input");
        let block = FirstOrderBlock {
            field: self.field.clone(),
            params: params.iter().map(|t| (*t).clone()).collect(),
            span: self.span,
            solver: self.solver,
        };
        let grads = block.adjoint_from_final(x0, self.final_state.clone(), grad_output)?;
        let mut out = vec![Some(grads.grad_x0)];
        out.extend(grads.grad_field.into_iter().map(Some));
        Ok(out)
    }
}

pub(super) fn record_first_order(block: &FirstOrderBlock, graph: &mut Graph, x: Var, params: &[Var]) -> Result<Var> {
    let expected: Vec<&Tensor> = block.params.iter().collect();
    check_param_vars(graph, params, &expected)?;
    let x0 = graph.value(x).clone();
    let z1 = block.forward_state(&x0)?;
    let out = z1.position().clone().reshape(x0.shape().to_vec())?;
    let op = FirstOrderOp {
        field: block.field.clone(),
        span: block.span,
        solver: block.solver,
        final_state: z1,
    };
    let mut inputs = vec![x];
    inputs.extend_from_slice(params);
    Ok(graph.custom(&inputs, out, Box::new(op)))
}
