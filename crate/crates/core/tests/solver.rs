use lensless_core::forward::dot;
use lensless_core::*;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_problem(seed: u64) -> (ConvOperator, SensorImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psfs = Array3::from_shape_fn((2, 8, 8), |_| rng.random::<f64>().powi(4));
    let mut stack = PsfStack::new(psfs, vec![12.0, 20.0]).unwrap();
    stack.normalize().unwrap();
    let op = ConvOperator::new(&stack).unwrap();
    let voxels = [
        Voxel { plane: 0, row: 7, col: 9, weight: 1.0 },
        Voxel { plane: 1, row: 10, col: 6, weight: 0.6 },
    ];
    let b = op.apply_sparse(&voxels).unwrap();
    (op, b)
}

fn norm(a: impl Iterator<Item = f64>) -> f64 {
    a.map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn combined_residual_never_increases_with_fixed_penalties() {
    for mode in [Regularizer::Identity, Regularizer::Tv3d] {
        let (op, b) = small_problem(1);
        let problem = AdmmProblem::new(&op, &b, 1e-3, mode).unwrap();
        let cfg = SolverConfig { auto_tune: false, ..Default::default() };
        let mut state = problem.initial_state([0.8, 0.05, 0.05]);
        let mut last = f64::INFINITY;
        for it in 0..300 {
            let (res, _) = problem.step(&mut state, &cfg).unwrap();
            let e: f64 = (0..3).map(|i| state.mu[i] * res.primal[i].powi(2) + res.dual[i].powi(2) / state.mu[i]).sum();
            assert!(e <= last * (1.0 + 1e-9) + 1e-24, "{mode:?} iteration {it}: {e} > {last}");
            last = e;
        }
    }
}

#[test]
fn solution_satisfies_nonnegative_lasso_optimality() {
    let (op, b) = small_problem(2);
    let atb = op.adjoint(&b).unwrap();
    let lambda = 0.05 * atb.data.iter().copied().fold(0.0, f64::max);
    let cfg = SolverConfig {
        lambda: Some(lambda),
        max_iters: 20_000,
        tol_abs: 1e-11,
        tol_rel: 1e-11,
        ..Default::default()
    };
    let sol = solve(&b, &op, &cfg).unwrap();
    let x = &sol.volume;
    let ax = op.apply(x).unwrap();
    let r = SensorImage::new(&ax.data - &b.data);
    let g = op.adjoint(&r).unwrap();
    let peak = x.data.iter().copied().fold(0.0, f64::max);
    assert!(peak > 0.1);
    let tol = 1e-4 * lambda;
    for (&xi, &gi) in x.data.iter().zip(g.data.iter()) {
        assert!(xi >= 0.0);
        if xi > 1e-6 * peak {
            assert!((gi + lambda).abs() <= tol, "active voxel gradient {gi} vs -λ {}", -lambda);
        } else {
            assert!(gi >= -lambda - tol, "inactive voxel gradient {gi} below -λ");
        }
    }
}

#[test]
fn scaling_data_and_lambda_scales_the_solution() {
    let (op, b) = small_problem(3);
    for mode in [Regularizer::Identity, Regularizer::Tv3d] {
        let cfg = |l: f64| SolverConfig { lambda: Some(l), regularizer: mode, max_iters: 50, ..Default::default() };
        let base = solve(&b, &op, &cfg(1e-3)).unwrap();
        let alpha = 37.5;
        let scaled = solve(&SensorImage::new(b.data.mapv(|v| alpha * v)), &op, &cfg(alpha * 1e-3)).unwrap();
        let diff = norm(scaled.volume.data.iter().zip(base.volume.data.iter()).map(|(s, x)| s - alpha * x));
        assert!(diff <= 1e-9 * alpha * norm(base.volume.data.iter().copied()));
        let obj = scaled.trace.rows.last().unwrap().objective / base.trace.rows.last().unwrap().objective;
        assert!((obj - alpha * alpha).abs() < 1e-6 * alpha * alpha);
    }
}

#[test]
fn sub_solves_are_stationary_points() {
    let (op, b) = small_problem(4);
    let problem = AdmmProblem::new(&op, &b, 2e-3, Regularizer::Tv3d).unwrap();
    let cfg = SolverConfig::default();
    let mut state = problem.initial_state([0.7, 0.2, 0.1]);
    for _ in 0..5 {
        problem.step(&mut state, &cfg).unwrap();
    }
    let [mu1, mu2, mu3] = state.mu;

    // x minimizes μ₁/2‖Mx − v + ξ‖² + μ₂/2‖Ψx − u + η‖² + μ₃/2‖x − w + ρ‖²,
    // so the gradient vanishes at the solution of the normal equations.
    let r = problem.x_rhs(&state);
    let x = problem.invert_x_system(&r, state.mu);
    let mtm = problem.m_adjoint(&problem.m_apply(&x));
    let psi = lensless_core::forward::psi_apply(&x, Regularizer::Tv3d);
    let ptp = lensless_core::forward::psi_adjoint(&psi, Regularizer::Tv3d);
    let lhs = mu1 * &mtm + mu2 * &ptp + mu3 * &x;
    let resid = norm(lhs.iter().zip(r.iter()).map(|(a, b)| a - b));
    assert!(resid <= 1e-10 * norm(r.iter().copied()));

    // w is the projection of x + ρ onto the nonnegative orthant.
    let w = problem.update_w(&state, true);
    let target = &state.x + &state.rho;
    for (&wi, &ti) in w.iter().zip(target.iter()) {
        assert_eq!(wi, ti.max(0.0));
    }

    // Perturbing v away from its update never lowers its sub-objective.
    let v = problem.update_v(&state);
    let (ny, nx) = op.sensor_shape();
    let (oy, ox) = (ny / 2, nx / 2);
    let mx = problem.m_apply(&state.x);
    let v_cost = |v: &Array3<f64>| {
        let mut c = 0.0;
        for r in 0..ny {
            for cc in 0..nx {
                c += 0.5 * (b.data[(r, cc)] - v[(0, oy + r, ox + cc)]).powi(2);
            }
        }
        c + 0.5 * mu1 * v.iter().zip(mx.iter()).zip(state.xi.iter()).map(|((v, m), xi)| (v - m - xi).powi(2)).sum::<f64>()
    };
    let best = v_cost(&v);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let dv = Array3::from_shape_fn(v.dim(), |_| 1e-3 * (rng.random::<f64>() - 0.5));
        assert!(v_cost(&(&v + &dv)) >= best);
    }
}

#[test]
fn default_lambda_is_a_small_fraction_of_the_back_projection_peak() {
    let (op, b) = small_problem(6);
    let atb = op.adjoint(&b).unwrap();
    let peak = atb.data.iter().copied().fold(0.0, f64::max);
    let lambda = default_lambda(&op, &b).unwrap();
    assert!(lambda > 0.0 && lambda < peak);
    // Solving with λ above ‖Aᵀb‖∞ returns the zero volume.
    let cfg = SolverConfig { lambda: Some(1.01 * peak), max_iters: 2000, ..Default::default() };
    let sol = solve(&b, &op, &cfg).unwrap();
    let mass: f64 = sol.volume.data.iter().map(|v| v.abs()).sum();
    assert!(mass < 1e-6 * dot(b.data.as_slice().unwrap(), b.data.as_slice().unwrap()).sqrt(), "mass {mass}");
}
