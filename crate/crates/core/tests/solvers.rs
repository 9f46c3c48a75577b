use continuum::solvers::{
    estimate_convergence_order, estimate_lipschitz, fit_order, integrate, integrate_between,
    integrate_trajectory, BoundingBox, TestProblem, VectorField,
};
use continuum::{IntegrationConfig, SolverKind};
use proptest::prelude::*;

fn dyadic_h(from: i32, to: i32) -> Vec<f64> {
    (from..=to).map(|k| 2f64.powi(-k)).collect()
}

fn expected(kind: SolverKind) -> (f64, f64) {
    match kind {
        SolverKind::Euler => (1.0, 0.15),
        SolverKind::AB2 | SolverKind::ABM2 => (2.0, 0.25),
        SolverKind::RK4 => (4.0, 0.35),
    }
}

#[test]
fn fitted_orders_on_both_problems() {
    let h = dyadic_h(3, 9);
    for problem in TestProblem::canonical() {
        for kind in SolverKind::ALL {
            let report = estimate_convergence_order(&problem, kind, &h).unwrap();
            let (p, tol) = expected(kind);
            assert!(
                (report.fitted_order - p).abs() <= tol,
                "{kind} on {}: {}",
                problem.name,
                report.fitted_order
            );
            assert!(report.errors.iter().all(|&e| e >= 0.0));
        }
    }
}

#[test]
fn order_bands_on_decay() {
    let h = dyadic_h(3, 8);
    let decay = TestProblem::decay();
    let euler = estimate_convergence_order(&decay, SolverKind::Euler, &h).unwrap();
    let ab2 = estimate_convergence_order(&decay, SolverKind::AB2, &h).unwrap();
    let rk4 = estimate_convergence_order(&decay, SolverKind::RK4, &h).unwrap();
    assert!((0.9..=1.1).contains(&euler.fitted_order));
    assert!((1.8..=2.2).contains(&ab2.fitted_order));
    assert!((3.7..=4.3).contains(&rk4.fitted_order));
}

#[test]
fn solver_ranking_on_forced_problem() {
    let p = TestProblem::forced_linear();
    let exact = (p.exact.as_ref().unwrap())(1.0)[0];
    let err = |k, n| (p.solve(k, n).unwrap()[0] - exact).abs();
    for n in [8, 32, 512] {
        assert!(err(SolverKind::RK4, n) < err(SolverKind::ABM2, n));
        assert!(err(SolverKind::RK4, n) < err(SolverKind::AB2, n));
    }
    assert!(err(SolverKind::ABM2, 512) < err(SolverKind::Euler, 512));
    assert!(err(SolverKind::AB2, 512) < err(SolverKind::Euler, 512));
}

fn harmonic(_t: f64, z: &[f64]) -> Vec<f64> {
    vec![z[1], -z[0]]
}

fn min_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn distinct_trajectories_never_meet() {
    let cfg = IntegrationConfig::unit(1000).unwrap();
    for kind in SolverKind::ALL {
        for problem in TestProblem::canonical() {
            let f = problem.field.clone();
            let a = integrate_trajectory(&mut VectorField(|t: f64, x: &[f64]| f(t, x)), vec![1.0], &cfg, kind).unwrap();
            let b = integrate_trajectory(&mut VectorField(|t: f64, x: &[f64]| f(t, x)), vec![1.001], &cfg, kind).unwrap();
            assert!(min_distance(&a, &b) > 1e-9, "{kind} {}", problem.name);
        }
        let span = IntegrationConfig::new(0.0, 6.0, 6000).unwrap();
        let a = integrate_trajectory(&mut VectorField(harmonic), vec![1.0, 0.0], &span, kind).unwrap();
        let b = integrate_trajectory(&mut VectorField(harmonic), vec![0.0, 1.0], &span, kind).unwrap();
        assert!(min_distance(&a, &b) > 1e-9);
    }
}

fn round_trip_error(steps: usize) -> f64 {
    let p = TestProblem::forced_linear();
    let f = p.field.clone();
    let mut sys = VectorField(move |t: f64, x: &[f64]| f(t, x));
    let fwd = integrate_between(&mut sys, p.x0.clone(), 0.0, 1.0, steps, SolverKind::RK4).unwrap();
    let back = integrate_between(&mut sys, fwd, 1.0, 0.0, steps, SolverKind::RK4).unwrap();
    (back[0] - p.x0[0]).abs()
}

#[test]
fn rk4_round_trip_error_is_fourth_order() {
    let h = dyadic_h(2, 6);
    let errors: Vec<f64> = h.iter().map(|h| round_trip_error((1.0 / h) as usize)).collect();
    // constant from the coarsest step, with headroom
    let c = 2.0 * errors[0] / h[0].powi(4);
    for (hv, e) in h.iter().zip(&errors) {
        assert!(*e <= c * hv.powi(4), "h={hv}: {e}");
    }
    let slope = fit_order(&h, &errors).unwrap();
    assert!(slope > 4.0 - 0.35, "{slope}");
}

#[test]
fn integration_is_deterministic() {
    let p = TestProblem::forced_linear();
    for kind in SolverKind::ALL {
        let a = p.solve(kind, 37).unwrap();
        let b = p.solve(kind, 37).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }
}

#[test]
fn order_estimate_preconditions() {
    let mut p = TestProblem::decay();
    assert!(estimate_convergence_order(&p, SolverKind::RK4, &dyadic_h(3, 5)).is_err());
    assert!(estimate_convergence_order(&p, SolverKind::RK4, &[0.5, 0.25, 0.2, 0.1]).is_err());
    p.exact = None;
    assert!(estimate_convergence_order(&p, SolverKind::RK4, &dyadic_h(3, 9)).is_err());
}

#[test]
fn global_error_csv() {
    let r = estimate_convergence_order(&TestProblem::decay(), SolverKind::Euler, &dyadic_h(3, 7)).unwrap();
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "h,error");
    assert_eq!(lines.len(), 7);
    assert!(lines[6].starts_with("# fitted_order="));
}

#[test]
fn lipschitz_estimates() {
    let region = BoundingBox::cube(1, 1.0);
    let l = estimate_lipschitz(|x| Ok(vec![3.0 * x[0]]), &region, 50, 1).unwrap();
    assert!((2.9..=3.0 + 1e-12).contains(&l));
    assert_eq!(estimate_lipschitz(|_| Ok(vec![0.0]), &region, 50, 1).unwrap(), 0.0);
    let flat = BoundingBox::new(vec![0.0, 1.0], vec![1.0, 1.0]);
    assert!(estimate_lipschitz(|x| Ok(x.to_vec()), &flat, 10, 0).is_err());
    assert!(estimate_lipschitz(|x| Ok(x.to_vec()), &region, 1, 0).is_err());
}

#[test]
fn divergence_is_reported_with_step() {
    let cfg = IntegrationConfig::unit(50).unwrap();
    let err = integrate(&mut VectorField(|_t: f64, x: &[f64]| vec![x[0].powi(2) * 1e3]), vec![1.0], &cfg, SolverKind::RK4)
        .unwrap_err();
    assert!(err.is_numerical());
    assert!(err.to_string().contains("step"));
}

proptest! {
    #[test]
    fn euler_step_is_one_plus_lambda_h(lambda in -64i32..64, x0 in -1024i32..1024, k in 0i32..6) {
        // dyadic inputs keep every product exact
        let (lambda, x0, h) = (lambda as f64 / 8.0, x0 as f64 / 16.0, 2f64.powi(-k));
        let cfg = IntegrationConfig::new(0.0, h, 1).unwrap();
        let out = integrate(&mut VectorField(move |_t: f64, x: &[f64]| vec![lambda * x[0]]), vec![x0], &cfg, SolverKind::Euler).unwrap();
        prop_assert_eq!(out[0], (1.0 + lambda * h) * x0);
    }

    #[test]
    fn zero_field_is_exact(x0 in prop::collection::vec(-1e3f64..1e3, 1..5), steps in 1usize..20) {
        let cfg = IntegrationConfig::new(-0.5, 2.0, steps).unwrap();
        for kind in SolverKind::ALL {
            let out = integrate(&mut VectorField(|_t: f64, x: &[f64]| vec![0.0; x.len()]), x0.clone(), &cfg, kind).unwrap();
            prop_assert_eq!(&out, &x0);
        }
    }

    #[test]
    fn lipschitz_of_linear_map_is_bounded_by_scale(a in -5.0f64..5.0, seed in 0u64..100) {
        let l = estimate_lipschitz(move |x| Ok(vec![a * x[0], a * x[1]]), &BoundingBox::cube(2, 1.0), 10, seed).unwrap();
        prop_assert!(l <= a.abs() * (1.0 + 1e-12));
        prop_assert!(l >= a.abs() * (1.0 - 1e-12));
    }
}
