use std::sync::Arc;

use continuum::gradcheck::{central_difference, relative_error, relative_error_tensors, tensor_central_difference};
use continuum::node::oracle::{stored_backprop, stored_backprop_first_order};
use continuum::node::{random_params, ConvField, ConvMap, Field, LinearField, ZeroField};
use continuum::solvers::{estimate_lipschitz, integrate, integrate_trajectory, BoundingBox};
use continuum::tensor::{Activation, Graph, Var};
use continuum::{AugmentedState, DynamicBlock, FirstOrderBlock, IntegrationConfig, Result, SolverKind, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_conv_block(channels: usize, steps: usize, solver: SolverKind, seed: u64) -> DynamicBlock {
    let mut r = rng(seed);
    let accel = ConvField::acceleration(channels);
    let g = ConvMap { channels };
    let ap = random_params(&accel, 0.2, &mut r);
    let gp = random_params(&g, 0.2, &mut r);
    DynamicBlock::new(
        Arc::new(accel),
        ap,
        Some(Arc::new(g)),
        gp,
        IntegrationConfig::unit(steps).unwrap(),
        solver,
    )
    .unwrap()
}

#[test]
fn forward_equals_manual_reduction_for_every_solver() {
    for seed in 0..10 {
        for solver in SolverKind::ALL {
            let block = random_conv_block(2, 7, solver, seed);
            let x0 = Tensor::randn([1, 2, 5, 5], 1.0, &mut rng(100 + seed));
            let z0 = block.initial_state(&x0).unwrap();
            let manual = integrate(&mut block.reduce_to_first_order(), z0, &block.span, solver).unwrap();
            assert_eq!(block.forward(&x0).unwrap(), manual.into_position(), "{solver} seed {seed}");
        }
    }
}

#[test]
fn zero_block_adjoint_passes_upstream_through() {
    let block = DynamicBlock::new(
        Arc::new(ZeroField),
        vec![],
        None,
        vec![],
        IntegrationConfig::unit(13).unwrap(),
        SolverKind::RK4,
    )
    .unwrap();
    let x0 = Tensor::randn([2, 3, 3], 1.0, &mut rng(1));
    let up = Tensor::randn([2, 3, 3], 1.0, &mut rng(2));
    let grads = block.adjoint_backward(&x0, &up).unwrap();
    assert_eq!(grads.grad_x0, up);
    assert!(grads.grad_field.is_empty());
    assert!(grads.grad_init.is_empty());
}

#[test]
fn identity_initialised_conv_block_passes_upstream_through() {
    let block = DynamicBlock::conv(3, IntegrationConfig::unit(4).unwrap(), SolverKind::RK4, &mut rng(3)).unwrap();
    let x0 = Tensor::randn([3, 6, 6], 1.0, &mut rng(4));
    let up = Tensor::randn([3, 6, 6], 1.0, &mut rng(5));
    assert_eq!(block.forward(&x0).unwrap(), x0);
    assert_eq!(block.adjoint_backward(&x0, &up).unwrap().grad_x0, up);
}

#[test]
fn parameter_free_init_gives_empty_init_gradient() {
    let mut r = rng(6);
    let accel = ConvField::acceleration(2);
    let block = DynamicBlock::new(
        Arc::new(accel.clone()),
        random_params(&accel, 0.2, &mut r),
        None,
        vec![],
        IntegrationConfig::unit(5).unwrap(),
        SolverKind::RK4,
    )
    .unwrap();
    let x0 = Tensor::randn([2, 4, 4], 1.0, &mut r);
    let grads = block.adjoint_backward(&x0, &Tensor::ones([2, 4, 4])).unwrap();
    assert!(grads.grad_init.is_empty());
    assert_eq!(grads.grad_field.len(), 4);
}

/// `L = ⟨w, x(t1)⟩` for a block rebuilt from flat scalar coefficients.
fn scalar_block(theta: &[f64], steps: usize) -> DynamicBlock {
    DynamicBlock::new(
        Arc::new(LinearField { arity: 2 }),
        LinearField::coefficients(&theta[..2]),
        Some(Arc::new(LinearField { arity: 1 })),
        LinearField::coefficients(&theta[2..]),
        IntegrationConfig::unit(steps).unwrap(),
        SolverKind::RK4,
    )
    .unwrap()
}

#[test]
fn scalar_block_adjoint_matches_finite_differences() {
    let theta = [-1.3, -0.2, 0.4];
    let x0 = Tensor::new([1, 1, 2], vec![0.7, -1.1]).unwrap();
    let w = Tensor::new([1, 1, 2], vec![1.0, 0.5]).unwrap();
    let steps = 100;
    let loss = |th: &[f64], x: &Tensor| -> Result<f64> { Ok(scalar_block(th, steps).forward(x)?.dot(&w)) };

    let grads = scalar_block(&theta, steps).adjoint_backward(&x0, &w).unwrap();
    let analytic: Vec<f64> = grads
        .grad_field
        .iter()
        .chain(&grads.grad_init)
        .map(|t| t.data()[0])
        .collect();
    let fd_theta = central_difference(|th| loss(th, &x0), &theta, 1e-4).unwrap();
    assert!(relative_error(&analytic, &fd_theta) <= 1e-3, "{analytic:?} vs {fd_theta:?}");

    let fd_x = tensor_central_difference(|x| loss(&theta, x), &x0, 1e-4).unwrap();
    assert!(relative_error(grads.grad_x0.data(), fd_x.data()) <= 1e-3);
}

#[test]
fn conv_block_adjoint_matches_stored_backprop_on_8x8() {
    let block = random_conv_block(2, 50, SolverKind::RK4, 7);
    let x0 = Tensor::randn([2, 8, 8], 1.0, &mut rng(8));
    let up = Tensor::randn([2, 8, 8], 1.0, &mut rng(9));
    let adj = block.adjoint_backward(&x0, &up).unwrap();
    let oracle = stored_backprop(&block, &x0, &up).unwrap();
    assert!(relative_error(adj.grad_x0.data(), oracle.grad_x0.data()) <= 1e-3);
    assert!(relative_error_tensors(&adj.grad_field, &oracle.grad_field) <= 1e-3);
    assert!(relative_error_tensors(&adj.grad_init, &oracle.grad_init) <= 1e-3);
}

fn adjoint_gap(block: &DynamicBlock, x0: &Tensor, up: &Tensor) -> f64 {
    let adj = block.adjoint_backward(x0, up).unwrap();
    let oracle = stored_backprop(block, x0, up).unwrap();
    let mut a = vec![adj.grad_x0];
    a.extend(adj.grad_field);
    a.extend(adj.grad_init);
    let mut b = vec![oracle.grad_x0];
    b.extend(oracle.grad_field);
    b.extend(oracle.grad_init);
    relative_error_tensors(&a, &b)
}

#[test]
fn adjoint_gap_shrinks_with_steps() {
    let x0 = Tensor::randn([2, 6, 6], 1.0, &mut rng(10));
    let up = Tensor::randn([2, 6, 6], 1.0, &mut rng(11));
    for solver in [SolverKind::Euler, SolverKind::RK4] {
        let gaps: Vec<f64> = [25, 50, 100, 200]
            .iter()
            .map(|&s| adjoint_gap(&random_conv_block(2, s, solver, 12), &x0, &up))
            .collect();
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{solver}: {gaps:?}");
    }
}

#[test]
fn retained_states_do_not_depend_on_steps() {
    let x0 = Tensor::randn([1, 4, 4], 1.0, &mut rng(13));
    let up = Tensor::ones([1, 4, 4]);
    for solver in SolverKind::ALL {
        let few = random_conv_block(1, 10, solver, 14).adjoint_backward(&x0, &up).unwrap();
        let many = random_conv_block(1, 1000, solver, 14).adjoint_backward(&x0, &up).unwrap();
        assert_eq!(few.stats.peak_retained_states, many.stats.peak_retained_states, "{solver}");
        assert!(many.stats.field_evaluations > few.stats.field_evaluations);
    }
}

#[test]
fn stored_backprop_memory_grows_with_steps() {
    let x0 = Tensor::randn([1, 4, 4], 1.0, &mut rng(15));
    let up = Tensor::ones([1, 4, 4]);
    let a = stored_backprop(&random_conv_block(1, 10, SolverKind::RK4, 16), &x0, &up).unwrap();
    let b = stored_backprop(&random_conv_block(1, 100, SolverKind::RK4, 16), &x0, &up).unwrap();
    assert!(b.retained_nodes > 5 * a.retained_nodes);
}

#[test]
fn recorded_block_backward_matches_direct_adjoint() {
    let block = random_conv_block(2, 6, SolverKind::ABM2, 17);
    let x0 = Tensor::randn([1, 2, 4, 4], 1.0, &mut rng(18));
    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let params: Vec<Var> = block
        .accel_params
        .iter()
        .chain(&block.init_params)
        .map(|p| g.param(p.clone()))
        .collect();
    let y = block.record(&mut g, x, &params).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    let direct = block.adjoint_backward(&x0, &Tensor::ones([1, 2, 4, 4])).unwrap();
    assert_eq!(grads.get(x).unwrap(), &direct.grad_x0);
    assert_eq!(grads.get(params[0]).unwrap(), &direct.grad_field[0]);
    assert_eq!(grads.get(params[5]).unwrap(), &direct.grad_init[1]);
}

fn decay_block(steps: usize) -> FirstOrderBlock {
    FirstOrderBlock::new(
        Arc::new(LinearField { arity: 1 }),
        LinearField::coefficients(&[-1.0]),
        IntegrationConfig::unit(steps).unwrap(),
        SolverKind::RK4,
    )
    .unwrap()
}

#[test]
fn first_order_zero_field_is_identity() {
    let block = FirstOrderBlock::new(
        Arc::new(ZeroField),
        vec![],
        IntegrationConfig::unit(9).unwrap(),
        SolverKind::AB2,
    )
    .unwrap();
    let x0 = Tensor::randn([2, 3, 3], 1.0, &mut rng(19));
    assert_eq!(block.forward(&x0).unwrap(), x0);
}

#[test]
fn first_order_decay_reaches_closed_form() {
    let x0 = Tensor::new([1, 1, 2], vec![1.0, -3.0]).unwrap();
    let out = decay_block(20).forward(&x0).unwrap();
    for (o, x) in out.data().iter().zip(x0.data()) {
        assert!((o - x * (-1.0f64).exp()).abs() < 1e-6);
    }
}

#[test]
fn first_order_adjoint_matches_finite_differences_and_oracle() {
    let mut r = rng(20);
    let field = ConvField::velocity(2);
    let params = random_params(&field, 0.25, &mut r);
    let make = |p: Vec<Tensor>| {
        FirstOrderBlock::new(Arc::new(field.clone()), p, IntegrationConfig::unit(60).unwrap(), SolverKind::RK4)
            .unwrap()
    };
    let block = make(params.clone());
    let x0 = Tensor::randn([2, 4, 4], 1.0, &mut r);
    let w = Tensor::randn([2, 4, 4], 1.0, &mut r);
    let grads = block.adjoint_backward(&x0, &w).unwrap();

    let fd_x = tensor_central_difference(|x| Ok(block.forward(x)?.dot(&w)), &x0, 1e-4).unwrap();
    assert!(relative_error(grads.grad_x0.data(), fd_x.data()) <= 1e-3);

    // conv1.bias, conv2.weight
    for i in [1, 2] {
        let fd = tensor_central_difference(
            |p| {
                let mut ps = params.clone();
                ps[i] = p.clone();
                Ok(make(ps).forward(&x0)?.dot(&w))
            },
            &params[i],
            1e-4,
        )
        .unwrap();
        assert!(relative_error(grads.grad_field[i].data(), fd.data()) <= 1e-3, "param {i}");
    }

    let oracle = stored_backprop_first_order(&block, &x0, &w).unwrap();
    assert!(relative_error(grads.grad_x0.data(), oracle.grad_x0.data()) <= 1e-3);
    assert!(relative_error_tensors(&grads.grad_field, &oracle.grad_field) <= 1e-3);
}

/// `x'' = −tanh(x)`: the reduced field has Jacobian `[[0, 1], [−sech² x, 0]]`,
/// whose spectral norm is at most 1.
#[derive(Debug)]
struct SoftPendulum;

impl Field for SoftPendulum {
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        Vec::new()
    }

    fn apply(&self, graph: &mut Graph, inputs: &[Var], _t: f64, _params: &[Var]) -> Result<Var> {
        let th = graph.activation(inputs[0], Activation::Tanh);
        graph.scale(th, -1.0)
    }
}

fn assert_within_envelope(block: &DynamicBlock, x0: &Tensor, lipschitz: f64) {
    let z0 = block.initial_state(&x0.clone().as_batch().unwrap()).unwrap();
    let traj = integrate_trajectory(&mut block.reduce_to_first_order(), z0.clone(), &block.span, block.solver).unwrap();
    let h = block.span.step_size();
    for (n, z) in traj.iter().enumerate() {
        let bound = z0.norm() * (lipschitz * n as f64 * h).exp() + 1e-12;
        assert!(z.norm() <= bound, "step {n}: {} > {bound}", z.norm());
    }
}

#[test]
fn trajectories_stay_inside_lipschitz_envelope() {
    let pendulum = DynamicBlock::new(
        Arc::new(SoftPendulum),
        vec![],
        None,
        vec![],
        IntegrationConfig::new(0.0, 5.0, 200).unwrap(),
        SolverKind::RK4,
    )
    .unwrap();
    let x0 = Tensor::randn([1, 3, 3], 2.0, &mut rng(21));
    assert_within_envelope(&pendulum, &x0, 1.0);

    // x'' = a·x + b·v: reduced matrix [[0, 1], [a, b]]
    let (a, b) = (-4.0, 0.5);
    let linear = DynamicBlock::new(
        Arc::new(LinearField { arity: 2 }),
        LinearField::coefficients(&[a, b]),
        None,
        vec![],
        IntegrationConfig::new(0.0, 2.0, 400).unwrap(),
        SolverKind::RK4,
    )
    .unwrap();
    // spectral norm of a 2×2 matrix
    let (fro2, det) = (1.0 + a * a + b * b, -a);
    let norm = ((fro2 + (fro2 * fro2 - 4.0 * det * det).sqrt()) / 2.0).sqrt();
    let estimate = estimate_lipschitz(
        |z| Ok(vec![z[1], a * z[0] + b * z[1]]),
        &BoundingBox::cube(2, 1.0),
        200,
        0,
    )
    .unwrap();
    assert!(estimate <= norm + 1e-12 && estimate > 0.9 * norm);
    assert_within_envelope(&linear, &Tensor::new([1, 1, 2], vec![1.0, -0.5]).unwrap(), norm);
}

#[test]
fn augmented_state_rejects_mismatched_parts() {
    assert!(AugmentedState::second_order(Tensor::zeros([1, 2, 2]), Tensor::zeros([1, 2, 3])).is_err());
}
