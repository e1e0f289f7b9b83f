//! Cross-module consistency at the public surface: the constants published
//! by the admissibility layer must be exactly the ones the solvers plan
//! with, the verification layer must close the loop on the same model, the
//! resolvent extension must agree with the direct diagonal action, and the
//! segment calculus must reproduce the neutral march.

use approx::assert_relative_eq;
use mildspde_core::{
    admissibility_constant, coupled_picard_path, delay_apply, estimate_dependence,
    default_lambda_schedule, gronwall_chain, history_lift, plan_windows,
    product_semigroup_apply, solve_multiplicative_unbounded, solve_neutral, solve_semilinear,
    solve_semilinear_single, transition_semigroup, yosida_extension, AtomWeight, DelayMeasure,
    DiagonalGenerator, DiffusionMap, DriftMap, Error, HilbertSchmidtMap, ModeVector,
    ObservationOperator, ProductState, SegmentDiffusion, SegmentState, SemilinearProblem,
    SolveOptions, TestFunction, TraceClassCovariance, WienerEnsemble,
};
use num_complex::Complex64;

fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn decaying(modes: usize) -> ModeVector {
    ModeVector::from_real(&(1..=modes).map(|k| 1.0 / k as f64).collect::<Vec<_>>())
}

#[test]
fn published_constants_size_the_solver_windows() {
    let modes = 16;
    let gen = DiagonalGenerator::heat(modes);
    let obs = ObservationOperator::fractional(&gen, 0.25).unwrap();
    let lipschitz = 0.75;
    let horizon = 1.0;

    let plan = plan_windows(&gen, &obs, lipschitz, horizon).unwrap();
    let report = admissibility_constant(&gen, &obs, &[plan.window], &[modes]).unwrap();
    let gamma = report.gamma_at(0, 0);
    assert_relative_eq!(plan.gamma, gamma, max_relative = 1e-12);
    assert_relative_eq!(
        plan.conv_constant,
        plan.window.sqrt() * gamma,
        max_relative = 1e-12
    );
    assert_relative_eq!(
        plan.picard_condition,
        2.0 * plan.conv_constant.powi(2) * lipschitz.powi(2),
        max_relative = 1e-12
    );
    assert!(plan.picard_condition < 0.5);
    assert!(plan.outer_contraction < 1.0);

    // The windows tile [0, T] contiguously.
    assert_relative_eq!(
        plan.window * plan.windows.len() as f64,
        horizon,
        max_relative = 1e-12
    );
    for (i, (a, b)) in plan.windows.iter().enumerate() {
        assert_relative_eq!(b - a, plan.window, max_relative = 1e-9);
        if i > 0 {
            assert_relative_eq!(*a, plan.windows[i - 1].1, max_relative = 1e-9);
        }
    }

    // The dependence chain reuses the same certified constants.
    let chain = gronwall_chain(&gen, &obs, lipschitz, horizon).unwrap();
    let chain_report = admissibility_constant(&gen, &obs, &[chain.window], &[modes]).unwrap();
    assert_relative_eq!(chain.gamma, chain_report.gamma_at(0, 0), max_relative = 1e-12);
    assert_relative_eq!(
        chain.window_condition,
        3.0 * (lipschitz * chain.conv_constant).powi(2),
        max_relative = 1e-12
    );
    assert!(chain.window_condition < 0.5);
    assert!(chain.bound >= chain.state_data, "C_T = C₃·e^{{C₄T}} with C₄ ≥ 0");
}

#[test]
fn solvers_verifiers_and_functionals_share_one_model() {
    let modes = 4;
    let gen = DiagonalGenerator::heat(modes);
    let obs = ObservationOperator::fractional(&gen, 0.25).unwrap();
    let problem = SemilinearProblem::new(
        gen,
        obs,
        DriftMap::saturating(0.5),
        DiffusionMap::additive(HilbertSchmidtMap::scaled_identity(modes, c64(0.3, 0.0))),
    )
    .unwrap();
    let cov = TraceClassCovariance::isotropic(modes, 1.0).unwrap();
    let ensemble = WienerEnsemble::new(cov, 0.5, 32, 4, 5).unwrap();
    let xi = ModeVector::from_real(&[0.8, -0.3, 0.4, 0.1]);
    let tol = 1e-10;

    let sol = solve_semilinear(&problem, &xi, &ensemble, &SolveOptions::with_tol(tol)).unwrap();
    assert!(sol.residual <= 1e-8, "window residual {:.3e}", sol.residual);

    // The single-level coupled fixed point lands on the same trajectories.
    for (p, path) in sol.paths.iter().enumerate() {
        let wiener = ensemble.path(p);
        let single = coupled_picard_path(&problem, &xi, &wiener, tol, 0).unwrap();
        let gap = path.sup_dist(&single);
        assert!(gap < 5.0 * tol, "path {p}: solver disagreement {gap:.3e}");

        let direct =
            solve_semilinear_single(&problem, &xi, &wiener, &SolveOptions::with_tol(tol)).unwrap();
        assert_eq!(
            direct.sup_dist(path),
            0.0,
            "ensemble and single-path entry points must agree exactly"
        );
    }

    // The dependence estimator accepts the same model and stays under its
    // own certified constant (it errors otherwise).
    let dep = estimate_dependence(
        &problem,
        &xi,
        &xi.scale_re(0.5),
        &ensemble,
        &SolveOptions::with_tol(1e-8),
    )
    .unwrap();
    assert!(dep.empirical_ratio <= dep.gronwall_bound);
    assert!(!dep.degenerate);

    // Transition functionals respect the test function's bound.
    let phi = TestFunction::tanh_norm_sq();
    let est = transition_semigroup(
        &problem,
        &phi,
        &xi,
        ensemble.horizon,
        &ensemble,
        &SolveOptions::with_tol(1e-8),
    )
    .unwrap();
    assert!(est.value.abs() <= 1.0, "tanh functional must stay in [−1, 1]");
    assert!(est.stderr.is_finite() && est.stderr >= 0.0);
}

#[test]
fn resolvent_extension_agrees_with_the_direct_diagonal_action() {
    let modes = 8;
    let gen = DiagonalGenerator::heat(modes);
    let obs = ObservationOperator::fractional(&gen, 0.25).unwrap();
    let smooth = decaying(modes);

    // Increments contract ×1/4 per rung, so twenty rungs land the last one
    // safely under the 1e-9 Cauchy allowance.
    let schedule = default_lambda_schedule(gen.growth_rate(), 20);
    let via_resolvent = yosida_extension(&gen, &obs, &smooth, &schedule, 1e-9).unwrap();
    let direct = obs.apply(&smooth).unwrap();
    let gap = via_resolvent.dist(&direct);
    assert!(
        gap <= 1e-8 * (1.0 + direct.norm()),
        "extension vs diagonal action differ by {gap:.3e}"
    );

    // The multiplicative solver admits the quarter power…
    let cov = TraceClassCovariance::isotropic(modes, 1.0).unwrap();
    let diffusion = DiffusionMap::state_scaling(c64(0.3, 0.0), &cov);
    let ensemble = WienerEnsemble::new(cov.clone(), 0.5, 64, 2, 13).unwrap();
    let sol = solve_multiplicative_unbounded(
        &gen,
        &obs,
        &diffusion,
        &decaying(modes),
        &ensemble,
        1e-10,
        0,
    )
    .unwrap();
    assert!(sol.contraction < 1.0);
    assert!(sol.residual <= 1e-8, "feedback residual {:.3e}", sol.residual);
    assert!(sol.paths.iter().all(|p| p.states.iter().all(ModeVector::is_finite)));

    // …and refuses the three-quarter power, which grows with the truncation.
    let steep = ObservationOperator::fractional(&gen, 0.75).unwrap();
    match solve_multiplicative_unbounded(
        &gen,
        &steep,
        &diffusion,
        &decaying(modes),
        &ensemble,
        1e-10,
        0,
    ) {
        Err(Error::NotZeroClass(report)) => {
            assert!(report.divergent || !report.zero_class);
        }
        Ok(_) => panic!("a divergent feedback operator must be refused"),
        Err(other) => panic!("expected an admissibility refusal, got: {other}"),
    }
}

#[test]
fn segment_calculus_reproduces_the_neutral_march() {
    // Pure difference dynamics: dZ = AZ dt, X(t) = Z(t) + 0.4·X(t−1),
    // X ≡ 1 on [−1, 0]. The product flow applied to (Z(0), X_0) must land
    // on the march's states at every grid time.
    let gen = DiagonalGenerator::heat(1);
    let r = 1.0;
    let slots = 8;
    let steps = 16;
    let horizon = 2.0;
    let xi = ModeVector::from_real(&[1.0]);
    let phi = SegmentState::constant(r, slots, xi.clone()).unwrap();
    let nu = DelayMeasure::new(r, 1.0, vec![(-1.0, AtomWeight::Scalar(c64(0.4, 0.0)))]).unwrap();
    let none = DelayMeasure::empty(r, 1.0).unwrap();
    let cov = TraceClassCovariance::isotropic(1, 1.0).unwrap();
    let ensemble = WienerEnsemble::new(cov, horizon, steps, 1, 3).unwrap();

    let sol = solve_neutral(
        &gen,
        &none,
        &nu,
        &DriftMap::zero(1),
        &SegmentDiffusion::zero(1),
        &xi,
        &phi,
        &ensemble,
        1e-12,
    )
    .unwrap();
    let x = &sol.x_paths[0];
    let z = &sol.z_paths[0];

    let head0 = xi.sub(&delay_apply(&nu, &phi).unwrap());
    let state0 = ProductState {
        head: head0,
        segment: phi.clone(),
    };
    let dt = horizon / steps as f64;
    for j in [0usize, 1, 4, 8, 11, 16] {
        let t = j as f64 * dt;
        let flowed = product_semigroup_apply(&gen, &nu, &state0, t).unwrap();
        let head_gap = flowed.head.dist(&z.states[j]);
        assert!(
            head_gap <= 1e-12,
            "t = {t}: product head differs from the march by {head_gap:.3e}"
        );
        let trace_gap = flowed.segment.at(0.0).unwrap().dist(&x.states[j]);
        assert!(
            trace_gap <= 1e-12,
            "t = {t}: segment trace differs from the march by {trace_gap:.3e}"
        );
    }

    // history_lift rebuilds exactly the segments the march consumed, so the
    // reconstruction identity X(t) = Z(t) + 𝒟X_t re-derives from public
    // pieces alone.
    for j in [0usize, 3, 8, 13, 16] {
        let seg = history_lift(&x.states, &phi, x.grid[j]).unwrap();
        let defect = x.states[j]
            .sub(&z.states[j])
            .sub(&delay_apply(&nu, &seg).unwrap())
            .norm();
        assert!(defect <= 1e-13, "grid point {j}: identity defect {defect:.3e}");
    }
}
