//! Monte Carlo verification layer.
//!
//! Everything here sits on top of the solvers and checks their output
//! against quantities that can be derived independently: a computable
//! continuous-dependence constant assembled from the admissibility
//! certificates, the transition semigroup P_tφ(x) = E φ(X(t,x)) with its
//! quantitative Feller modulus, and two oracles (an explicit Euler–Maruyama
//! march and a single-level coupled fixed point) that discretize the same
//! equations without sharing the production marching kernel's structure.
//!
//! All ensemble statistics use deterministic pairwise reductions in path
//! order, so every report is reproducible bit for bit across thread counts.

use crate::error::{invalid, ConvergenceDiagnostic, Error, Result, WindowCandidate};
use crate::numerics::mean_and_stderr;
use crate::path::SolutionPath;
use crate::solvers::{solve_semilinear, solve_semilinear_single, SemilinearProblem, SolveOptions};
use crate::spectral::{
    admissibility_constant, DiagonalGenerator, ModeVector, ObservationOperator,
};
use crate::stochastics::{mild_march, StepCoeffs, WienerEnsemble, WienerPath};
use rayon::prelude::*;
use std::fmt;
use std::sync::Arc;

/// Dyadic refinement floor shared with the solver window search.
const WINDOW_REFINEMENT_FLOOR: u32 = 20;

// ---------------------------------------------------------------------------
// Continuous dependence: the computable constant chain
// ---------------------------------------------------------------------------

/// The full constant chain certifying mean-square continuous dependence on
/// initial data: E‖X(t,ξ) − X(t,η)‖² ≤ C_T·E‖ξ − η‖² for t ≤ T.
///
/// The chain is assembled window by window. On a window of length T₀ chosen
/// so that 3k²c(T₀)² < 1/2, the observed difference obeys
///
///   ∫ ‖C_Λ ΔX‖² ≤ 6γ² ‖ΔX(window start)‖² + 6k²γ² ∫ ‖ΔX‖²,
///
/// window endpoints propagate with gain A = 3M²(1 + 6T₀k²γ²) and forcing
/// coefficient B = 3M²k²(1 + 6k²T₀γ²), and summing the geometric series
/// S_A = (A^W − 1)/(A − 1) over the W windows gives global coefficients
///
///   C_{T,1} = 6γ²·S_A,          C_{T,2} = 6γ²·B·S_A + 6k²γ²,
///   C_{T,3} = 3M²(1 + k²·T·C_{T,1}),   C_{T,4} = 3M²k²(1 + T·C_{T,2}),
///
/// and finally C_T = C_{T,3}·e^{C_{T,4}·T} by Gronwall's inequality. Every
/// intermediate value is recorded so the bound can be audited.
#[derive(Debug, Clone)]
pub struct GronwallChain {
    /// Full horizon T.
    pub horizon: f64,
    /// Certified window length T₀ (largest dyadic fraction of T passing
    /// 3k²c(T₀)² < 1/2).
    pub window: f64,
    /// Number of windows W = T / T₀.
    pub windows: usize,
    /// Semigroup bound M = sup_{t ≤ T} ‖T(t)‖.
    pub growth_bound: f64,
    /// Nonlinearity Lipschitz constant k.
    pub lipschitz: f64,
    /// Admissibility constant γ(T₀).
    pub gamma: f64,
    /// Convolution constant c(T₀) = √T₀·γ(T₀).
    pub conv_constant: f64,
    /// Window condition value 3k²c(T₀)² (< 1/2 by construction).
    pub window_condition: f64,
    /// Endpoint gain A.
    pub endpoint_gain: f64,
    /// Endpoint forcing coefficient B.
    pub endpoint_forcing: f64,
    /// Geometric window sum S_A.
    pub window_sum: f64,
    /// C_{T,1}: observed-difference coefficient on the initial data.
    pub observed_data: f64,
    /// C_{T,2}: observed-difference coefficient on the state integral.
    pub observed_state: f64,
    /// C_{T,3}: state coefficient on the initial data.
    pub state_data: f64,
    /// C_{T,4}: Gronwall rate.
    pub state_rate: f64,
    /// The dependence constant C_T.
    pub bound: f64,
}

/// Assemble the continuous-dependence constant for a generator/observer
/// pair with nonlinearity Lipschitz constant `lipschitz` on `[0, horizon]`.
///
/// The window search walks the dyadic lengths horizon/2^i from the largest
/// down, certifying the first one with 3k²c(T₀)² < 1/2; if even the floor
/// fails, the full list of rejected candidates is returned.
pub fn gronwall_chain(
    gen: &DiagonalGenerator,
    obs: &ObservationOperator,
    lipschitz: f64,
    horizon: f64,
) -> Result<GronwallChain> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon must be finite and > 0"));
    }
    if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
        return Err(invalid("Lipschitz constant must be finite and ≥ 0"));
    }
    let alphas: Vec<f64> = (0..=WINDOW_REFINEMENT_FLOOR)
        .rev()
        .map(|i| horizon / (1u64 << i) as f64)
        .collect();
    let report = admissibility_constant(gen, obs, &alphas, &[gen.mode_count()])?;
    let k = lipschitz;
    let m = gen.growth_scale() * 1.0f64.max((gen.growth_rate() * horizon).exp());
    let mut candidates = Vec::new();
    for i in 0..=WINDOW_REFINEMENT_FLOOR {
        let idx = (WINDOW_REFINEMENT_FLOOR - i) as usize;
        let window = alphas[idx];
        let gamma = report.gamma_at(idx, 0);
        let c = report.convolution_constant(idx, 0);
        let condition = 3.0 * k * k * c * c;
        if condition < 0.5 {
            let windows = 1usize << i;
            let g2 = gamma * gamma;
            let endpoint_gain = 3.0 * m * m * (1.0 + 6.0 * window * k * k * g2);
            let endpoint_forcing = 3.0 * m * m * k * k * (1.0 + 6.0 * k * k * window * g2);
            let window_sum = if windows == 1 {
                1.0
            } else {
                (endpoint_gain.powi(windows as i32) - 1.0) / (endpoint_gain - 1.0)
            };
            let observed_data = 6.0 * g2 * window_sum;
            let observed_state = 6.0 * g2 * endpoint_forcing * window_sum + 6.0 * k * k * g2;
            let state_data = 3.0 * m * m * (1.0 + k * k * horizon * observed_data);
            let state_rate = 3.0 * m * m * k * k * (1.0 + horizon * observed_state);
            let bound = state_data * (state_rate * horizon).exp();
            if !bound.is_finite() {
                return Err(invalid(format!(
                    "dependence constant overflows at window {window}: \
                     gain {endpoint_gain} over {windows} windows"
                )));
            }
            return Ok(GronwallChain {
                horizon,
                window,
                windows,
                growth_bound: m,
                lipschitz: k,
                gamma,
                conv_constant: c,
                window_condition: condition,
                endpoint_gain,
                endpoint_forcing,
                window_sum,
                observed_data,
                observed_state,
                state_data,
                state_rate,
                bound,
            });
        }
        candidates.push(WindowCandidate {
            window,
            picard_condition: condition,
            outer_contraction: f64::INFINITY,
        });
    }
    Err(Error::NoAdmissibleWindow {
        floor: alphas[0],
        candidates,
    })
}

// ---------------------------------------------------------------------------
// Continuous dependence: the empirical estimate
// ---------------------------------------------------------------------------

/// Empirical continuous-dependence report under synchronous coupling.
#[derive(Debug, Clone)]
pub struct DependenceReport {
    /// Horizon of the comparison.
    pub horizon: f64,
    /// sup_{grid t} Ê‖X(t,ξ) − X(t,η)‖² / ‖ξ − η‖².
    pub empirical_ratio: f64,
    /// Standard error of the ratio estimate at the supremum's grid point.
    pub stderr: f64,
    /// Grid time attaining the supremum.
    pub argmax_time: f64,
    /// The certified bound the ratio is checked against.
    pub gronwall_bound: f64,
    /// The full constant chain behind the bound.
    pub chain: GronwallChain,
    /// Set when ξ = η, in which case the ratio is 0 by convention.
    pub degenerate: bool,
    /// Number of coupled path pairs.
    pub n_paths: usize,
}

/// Estimate the mean-square continuous-dependence ratio by solving the same
/// problem from ξ and η with the *same* Wiener path per ensemble index
/// (synchronous coupling) and comparing against [`gronwall_chain`].
///
/// Fails with `ResidualTooLarge` if the empirical ratio exceeds the bound
/// beyond three standard errors; ξ = η short-circuits to a degenerate
/// report of ratio zero.
pub fn estimate_dependence(
    problem: &SemilinearProblem,
    xi: &ModeVector,
    eta: &ModeVector,
    ensemble: &WienerEnsemble,
    options: &SolveOptions,
) -> Result<DependenceReport> {
    let gen = problem.generator();
    if xi.len() != gen.mode_count() || eta.len() != gen.mode_count() {
        return Err(invalid(format!(
            "initial data must have {} modes, got {} and {}",
            gen.mode_count(),
            xi.len(),
            eta.len()
        )));
    }
    let chain = gronwall_chain(
        gen,
        problem.observer(),
        problem.planning_lipschitz(),
        ensemble.horizon,
    )?;
    let denominator = {
        let d = xi.dist(eta);
        d * d
    };
    if denominator == 0.0 {
        return Ok(DependenceReport {
            horizon: ensemble.horizon,
            empirical_ratio: 0.0,
            stderr: 0.0,
            argmax_time: 0.0,
            gronwall_bound: chain.bound,
            chain,
            degenerate: true,
            n_paths: ensemble.n_paths,
        });
    }

    let pairs: Vec<(SolutionPath, SolutionPath)> = (0..ensemble.n_paths)
        .into_par_iter()
        .map(|i| -> Result<(SolutionPath, SolutionPath)> {
            // Synchronous coupling: one sampled path drives both solves.
            let wiener = ensemble.path(i);
            debug_assert_eq!(wiener.path_index(), i as u64);
            let a = solve_semilinear_single(problem, xi, &wiener, options)?;
            let b = solve_semilinear_single(problem, eta, &wiener, options)?;
            Ok((a, b))
        })
        .collect::<Result<_>>()?;

    let grid = pairs[0].0.grid.clone();
    let mut sup_mean = f64::NEG_INFINITY;
    let mut sup_se = 0.0;
    let mut argmax_time = 0.0;
    let mut col = vec![0.0; pairs.len()];
    for j in 0..grid.len() {
        for (i, (a, b)) in pairs.iter().enumerate() {
            let d = a.states[j].dist(&b.states[j]);
            col[i] = d * d;
        }
        let (mean, se) = mean_and_stderr(&col);
        if mean > sup_mean {
            sup_mean = mean;
            sup_se = se;
            argmax_time = grid[j];
        }
    }
    let empirical_ratio = sup_mean / denominator;
    let stderr = sup_se / denominator;
    let allowance = chain.bound * (1.0 + 3.0 * stderr / empirical_ratio.max(f64::MIN_POSITIVE));
    if empirical_ratio > allowance {
        return Err(Error::ResidualTooLarge {
            residual: empirical_ratio,
            allowance,
        });
    }
    Ok(DependenceReport {
        horizon: ensemble.horizon,
        empirical_ratio,
        stderr,
        argmax_time,
        gronwall_bound: chain.bound,
        chain,
        degenerate: false,
        n_paths: ensemble.n_paths,
    })
}

// ---------------------------------------------------------------------------
// Transition semigroup
// ---------------------------------------------------------------------------

/// A bounded test function with a declared sup bound and Lipschitz
/// constant. The bound is enforced sample by sample, which is what makes
/// |P̂_tφ| ≤ sup|φ| exact: the estimator is a plain mean of values that
/// have all been checked against the bound.
#[derive(Clone)]
pub struct TestFunction {
    evaluator: Arc<dyn Fn(&ModeVector) -> f64 + Send + Sync>,
    label: String,
    bound: f64,
    lipschitz: f64,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("label", &self.label)
            .field("bound", &self.bound)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl TestFunction {
    pub fn new(
        label: impl Into<String>,
        bound: f64,
        lipschitz: f64,
        evaluator: impl Fn(&ModeVector) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) || !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(invalid("test function needs a positive bound and a finite Lipschitz constant"));
        }
        Ok(Self {
            evaluator: Arc::new(evaluator),
            label: label.into(),
            bound,
            lipschitz,
        })
    }

    /// φ(x) = tanh(‖x‖²): bounded by 1 with Lipschitz constant 1.12
    /// (the true supremum of |∇φ| is 1.1137…, attained at ‖x‖ ≈ 0.722).
    pub fn tanh_norm_sq() -> Self {
        Self::new("tanh of squared norm", 1.0, 1.12, |x: &ModeVector| {
            x.norm_sq().tanh()
        })
        .expect("constants are valid")
    }

    /// The constant function c.
    pub fn constant(c: f64) -> Result<Self> {
        Self::new(format!("constant {c}"), c.abs().max(f64::MIN_POSITIVE), 0.0, move |_| c)
    }

    pub fn eval(&self, x: &ModeVector) -> f64 {
        (self.evaluator)(x)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

/// Monte Carlo estimate of P_tφ(x) = E φ(X(t, x)).
#[derive(Debug, Clone)]
pub struct TransitionEstimate {
    /// Label of the test function.
    pub label: String,
    /// Evaluation point x.
    pub point: ModeVector,
    /// Transition time t.
    pub time: f64,
    /// The estimate P̂_tφ(x).
    pub value: f64,
    /// Standard error of the estimate.
    pub stderr: f64,
    /// Ensemble size behind the estimate.
    pub n_paths: usize,
}

/// φ evaluated at the terminal state of every ensemble path, in path order,
/// each sample checked against the declared bound.
fn terminal_samples(
    problem: &SemilinearProblem,
    phi: &TestFunction,
    x: &ModeVector,
    ensemble: &WienerEnsemble,
    options: &SolveOptions,
) -> Result<Vec<f64>> {
    let solution = solve_semilinear(problem, x, ensemble, options)?;
    let mut values = Vec::with_capacity(solution.paths.len());
    for path in &solution.paths {
        let terminal = path.states.last().expect("paths are nonempty");
        let v = phi.eval(terminal);
        if !v.is_finite() || v.abs() > phi.bound() {
            return Err(invalid(format!(
                "test function '{}' produced {v} beyond its declared bound {}",
                phi.label(),
                phi.bound()
            )));
        }
        values.push(v);
    }
    Ok(values)
}

/// Estimate the transition semigroup P_tφ(x) by the ensemble mean of
/// φ(X(t,x)). t = 0 is exact (no solve); otherwise t must equal the
/// ensemble horizon.
pub fn transition_semigroup(
    problem: &SemilinearProblem,
    phi: &TestFunction,
    x: &ModeVector,
    t: f64,
    ensemble: &WienerEnsemble,
    options: &SolveOptions,
) -> Result<TransitionEstimate> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(invalid("transition time must be finite and ≥ 0"));
    }
    if t == 0.0 {
        let value = phi.eval(x);
        if !value.is_finite() || value.abs() > phi.bound() {
            return Err(invalid(format!(
                "test function '{}' produced {value} beyond its declared bound {}",
                phi.label(),
                phi.bound()
            )));
        }
        return Ok(TransitionEstimate {
            label: phi.label().to_string(),
            point: x.clone(),
            time: 0.0,
            value,
            stderr: 0.0,
            n_paths: 0,
        });
    }
    if (t - ensemble.horizon).abs() > 1e-9 * t {
        return Err(invalid(format!(
            "transition time {t} must equal the ensemble horizon {}",
            ensemble.horizon
        )));
    }
    let values = terminal_samples(problem, phi, x, ensemble, options)?;
    let (value, stderr) = mean_and_stderr(&values);
    Ok(TransitionEstimate {
        label: phi.label().to_string(),
        point: x.clone(),
        time: t,
        value,
        stderr,
        n_paths: values.len(),
    })
}

// ---------------------------------------------------------------------------
// Feller modulus
// ---------------------------------------------------------------------------

/// One row of the Feller table: the transition estimates at x and at the
/// shifted point x + r·e₁, with the coupled gap and its certified allowance.
#[derive(Debug, Clone)]
pub struct FellerRow {
    pub radius: f64,
    /// P̂_tφ(x).
    pub value_base: f64,
    /// P̂_tφ(x + r·e₁).
    pub value_shifted: f64,
    /// |mean of the coupled per-path differences|.
    pub gap: f64,
    /// Standard error of the coupled difference.
    pub stderr: f64,
    /// L_φ·√C_T·r + 3·stderr, the bound the gap is held to.
    pub allowance: f64,
}

/// Quantitative Feller check: the modulus of continuity of P_tφ at x.
#[derive(Debug, Clone)]
pub struct FellerTable {
    pub point: ModeVector,
    pub time: f64,
    pub rows: Vec<FellerRow>,
    pub chain: GronwallChain,
    pub lipschitz_phi: f64,
    pub n_paths: usize,
}

/// Measure |P̂_tφ(x) − P̂_tφ(x + r·e₁)| for each radius under synchronous
/// coupling and hold every gap to the quantitative Lipschitz bound
/// L_φ·√C_T·r + 3·stderr. The shift direction is the first coordinate
/// basis vector. t is the ensemble horizon.
pub fn feller_modulus(
    problem: &SemilinearProblem,
    phi: &TestFunction,
    x: &ModeVector,
    radii: &[f64],
    ensemble: &WienerEnsemble,
    options: &SolveOptions,
) -> Result<FellerTable> {
    if radii.is_empty() {
        return Err(invalid("feller modulus needs at least one radius"));
    }
    if radii.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(invalid("radii must be finite and ≥ 0"));
    }
    let chain = gronwall_chain(
        problem.generator(),
        problem.observer(),
        problem.planning_lipschitz(),
        ensemble.horizon,
    )?;
    let direction = ModeVector::basis(x.len(), 0)?;
    let base = terminal_samples(problem, phi, x, ensemble, options)?;
    let (value_base, _) = mean_and_stderr(&base);
    let mut rows = Vec::with_capacity(radii.len());
    for &radius in radii {
        let shifted_point = x.add(&direction.scale_re(radius));
        let shifted = terminal_samples(problem, phi, &shifted_point, ensemble, options)?;
        let diffs: Vec<f64> = base.iter().zip(&shifted).map(|(a, b)| a - b).collect();
        let (mean_diff, stderr) = mean_and_stderr(&diffs);
        let (value_shifted, _) = mean_and_stderr(&shifted);
        let gap = mean_diff.abs();
        let allowance = phi.lipschitz() * chain.bound.sqrt() * radius + 3.0 * stderr;
        if gap > allowance {
            return Err(Error::ResidualTooLarge {
                residual: gap,
                allowance,
            });
        }
        rows.push(FellerRow {
            radius,
            value_base,
            value_shifted,
            gap,
            stderr,
            allowance,
        });
    }
    Ok(FellerTable {
        point: x.clone(),
        time: ensemble.horizon,
        rows,
        chain,
        lipschitz_phi: phi.lipschitz(),
        n_paths: ensemble.n_paths,
    })
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// Result of the explicit Euler–Maruyama oracle, with the stiffness number
/// max|μ_n|·Δt it ran at. The scheme is deliberately primitive — raw
/// increments, no exponential integrator, no variance correction — so it is
/// an independent cross-check of the production kernel, not a copy of it.
#[derive(Debug, Clone)]
pub struct EulerMaruyamaRun {
    pub path: SolutionPath,
    /// max|μ_n|·Δt at which the march ran.
    pub stiffness: f64,
    /// Set when 0.5 < stiffness ≤ 2: results are usable but inaccurate.
    pub stiff_warning: bool,
}

/// Explicit Euler–Maruyama march of the truncated system:
/// x_{j+1} = x_j + Δt·(A x_j + F(C_Λ x_j)) + 𝓜(x_j)·ΔW_j.
/// Refuses outright at stiffness max|μ_n|Δt > 2 and flags a warning
/// above 0.5.
pub fn euler_maruyama_path(
    problem: &SemilinearProblem,
    xi: &ModeVector,
    wiener: &WienerPath,
) -> Result<EulerMaruyamaRun> {
    let gen = problem.generator();
    let modes = gen.mode_count();
    if xi.len() != modes {
        return Err(invalid(format!(
            "initial state has {} modes, generator {modes}",
            xi.len()
        )));
    }
    let dt = wiener.uniform_dt()?;
    let stiffness = gen
        .eigenvalues()
        .iter()
        .map(|mu| mu.norm())
        .fold(0.0f64, f64::max)
        * dt;
    if stiffness > 2.0 {
        return Err(Error::StiffStep {
            stiffness,
            limit: 2.0,
        });
    }
    let obs = problem.observer();
    let drift = problem.drift();
    let diffusion = problem.diffusion();
    let mut states = Vec::with_capacity(wiener.steps() + 1);
    let mut x = xi.clone();
    states.push(x.clone());
    for j in 0..wiener.steps() {
        let forcing = drift.eval(&obs.apply(&x)?);
        if forcing.len() != modes {
            return Err(invalid(format!(
                "drift '{}' returned {} modes, need {modes}",
                drift.label(),
                forcing.len()
            )));
        }
        let noise = diffusion.eval(&x).apply_noise(wiener.increment(j))?;
        let mut next = Vec::with_capacity(modes);
        for (n, mu) in gen.eigenvalues().iter().enumerate() {
            next.push(x.coeff(n) + dt * (mu * x.coeff(n) + forcing.coeff(n)) + noise.coeff(n));
        }
        x = ModeVector::new(next)
            .map_err(|_| invalid(format!("explicit march left the finite range at step {j}")))?;
        states.push(x.clone());
    }
    Ok(EulerMaruyamaRun {
        path: SolutionPath::new(wiener.grid().to_vec(), states)?,
        stiffness,
        stiff_warning: stiffness > 0.5,
    })
}

/// Single-level coupled fixed point: iterate the full pair of maps at once,
/// marching with forcing F(C_Λ u_j) *and* noise 𝓜(u_j) both frozen at the
/// previous iterate's left endpoints, starting from the drift-free march
/// driven by 𝓜(0). Stops when the uniform-in-time state distance between
/// consecutive iterates is ≤ tol. This is a deliberately different
/// fixed-point architecture from the production two-level scheme; both
/// stabilize on the same causal discrete recursion.
///
/// `max_iter = 0` resolves to steps + 8, enough for the causality argument
/// to force exact stabilization.
pub fn coupled_picard_path(
    problem: &SemilinearProblem,
    xi: &ModeVector,
    wiener: &WienerPath,
    tol: f64,
    max_iter: usize,
) -> Result<SolutionPath> {
    let gen = problem.generator();
    let modes = gen.mode_count();
    if xi.len() != modes {
        return Err(invalid(format!(
            "initial state has {} modes, generator {modes}",
            xi.len()
        )));
    }
    if !(tol >= 0.0 && tol.is_finite()) {
        return Err(invalid("tolerance must be finite and ≥ 0"));
    }
    let steps = wiener.steps();
    let budget = if max_iter == 0 { steps + 8 } else { max_iter };
    let dt = wiener.uniform_dt()?;
    let coeffs = StepCoeffs::new(gen, dt)?;
    let obs = problem.observer();
    let drift = problem.drift();
    let diffusion = problem.diffusion();

    let zero = ModeVector::zeros(modes);
    let map0 = diffusion.eval(&zero);
    // Validate the channel count once so the marching closures can expect.
    map0.apply_noise(wiener.increment(0))?;
    let mut current = mild_march(&coeffs, xi, steps, |_, _| None, |j| {
        Some(map0.apply_noise(wiener.increment(j)).expect("channel count checked"))
    });

    let mut increments = Vec::new();
    let mut converged = false;
    for _ in 0..budget {
        let mut forcing_err = None;
        let next = {
            let prev = &current;
            mild_march(
                &coeffs,
                xi,
                steps,
                |j, _| {
                    let f = drift.eval(&obs.apply(&prev[j]).expect("mode count validated"));
                    if f.len() != modes {
                        forcing_err = Some(invalid(format!(
                            "drift '{}' returned {} modes, need {modes}",
                            drift.label(),
                            f.len()
                        )));
                    }
                    Some(f)
                },
                |j| {
                    Some(
                        diffusion
                            .eval(&prev[j])
                            .apply_noise(wiener.increment(j))
                            .expect("channel count checked"),
                    )
                },
            )
        };
        if let Some(err) = forcing_err {
            return Err(err);
        }
        let inc = current
            .iter()
            .zip(&next)
            .map(|(a, b)| a.dist(b))
            .fold(0.0f64, f64::max);
        increments.push(inc);
        current = next;
        if inc <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::ConvergenceFailure(ConvergenceDiagnostic {
            label: "coupled fixed point".into(),
            tolerance: tol,
            max_iterations: budget,
            increments,
        }));
    }
    let observed = current
        .iter()
        .map(|s| obs.apply(s))
        .collect::<Result<Vec<_>>>()?;
    let mut path = SolutionPath::new(wiener.grid().to_vec(), current)?;
    path.observed = Some(observed);
    path.iteration_increments = increments;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::{DiffusionMap, DriftMap};
    use crate::spectral::semigroup_apply;
    use crate::stochastics::{HilbertSchmidtMap, TraceClassCovariance};
    use approx::assert_relative_eq;
    use num_complex::Complex64;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn gronwall_chain_assembles_the_audited_constants() {
        let gen = DiagonalGenerator::heat(16);
        let obs = ObservationOperator::fractional(&gen, 0.25).unwrap();
        let k = 0.5;
        let chain = gronwall_chain(&gen, &obs, k, 1.0).unwrap();

        // Recompute every stage from a fresh admissibility sweep.
        let report = admissibility_constant(&gen, &obs, &[chain.window], &[16]).unwrap();
        let gamma = report.gamma_at(0, 0);
        let cw = report.convolution_constant(0, 0);
        assert_relative_eq!(chain.gamma, gamma, max_relative = 1e-13);
        assert!(3.0 * k * k * cw * cw < 0.5);
        assert_relative_eq!(chain.window_condition, 3.0 * k * k * cw * cw, max_relative = 1e-13);
        let m = 1.0; // heat semigroup is a contraction
        assert_eq!(chain.growth_bound, m);
        let g2 = gamma * gamma;
        let a = 3.0 * m * m * (1.0 + 6.0 * chain.window * k * k * g2);
        let b = 3.0 * m * m * k * k * (1.0 + 6.0 * k * k * chain.window * g2);
        assert_relative_eq!(chain.endpoint_gain, a, max_relative = 1e-13);
        assert_relative_eq!(chain.endpoint_forcing, b, max_relative = 1e-13);
        let w = chain.windows as i32;
        let s = (a.powi(w) - 1.0) / (a - 1.0);
        assert_relative_eq!(chain.window_sum, s, max_relative = 1e-12);
        let c1 = 6.0 * g2 * s;
        let c2 = 6.0 * g2 * b * s + 6.0 * k * k * g2;
        let c3 = 3.0 * m * m * (1.0 + k * k * 1.0 * c1);
        let c4 = 3.0 * m * m * k * k * (1.0 + 1.0 * c2);
        assert_relative_eq!(chain.observed_data, c1, max_relative = 1e-12);
        assert_relative_eq!(chain.observed_state, c2, max_relative = 1e-12);
        assert_relative_eq!(chain.state_data, c3, max_relative = 1e-12);
        assert_relative_eq!(chain.state_rate, c4, max_relative = 1e-12);
        assert_relative_eq!(chain.bound, c3 * (c4).exp(), max_relative = 1e-12);
        assert_eq!(chain.window * chain.windows as f64, 1.0);

        // Without a nonlinearity the whole chain collapses to 3M².
        let free = gronwall_chain(&gen, &obs, 0.0, 1.0).unwrap();
        assert_eq!(free.window, 1.0);
        assert_eq!(free.windows, 1);
        assert_eq!(free.bound, 3.0);
    }

    fn linear_scalar_problem(a: f64, k: f64, attenuation: f64) -> SemilinearProblem {
        let gen = DiagonalGenerator::new(vec![c(a, 0.0)]).unwrap();
        let obs =
            ObservationOperator::diagonal(vec![c(attenuation, 0.0)], "attenuator").unwrap();
        SemilinearProblem::new(gen, obs, DriftMap::linear(k), DiffusionMap::zero(1)).unwrap()
    }

    #[test]
    fn dependence_ratio_matches_the_linear_flow() {
        // dX = aX dt + k·(cX) dt: the difference of two solutions grows by
        // exactly the discrete one-step multiplier, and the continuous
        // ratio e^{2(a+kc)T} emerges as the grid refines.
        let (a, k, att) = (0.1, 0.5, 0.2);
        let problem = linear_scalar_problem(a, k, att);
        let xi = ModeVector::from_real(&[1.0]);
        let eta = ModeVector::from_real(&[0.5]);
        let steps = 4096;
        let cov = TraceClassCovariance::isotropic(1, 1.0).unwrap();
        let ensemble = WienerEnsemble::new(cov, 1.0, steps, 2, 5).unwrap();
        let report = estimate_dependence(
            &problem,
            &xi,
            &eta,
            &ensemble,
            &SolveOptions::with_tol(1e-12),
        )
        .unwrap();
        assert!(!report.degenerate);
        assert_eq!(report.argmax_time, 1.0);

        // Exact discrete ratio: per-step multiplier of the difference.
        let dt = 1.0 / steps as f64;
        let phi1 = ((a * dt).exp() - 1.0) / (a * dt);
        let multiplier = (a * dt).exp() + k * att * dt * phi1;
        let discrete = multiplier.powi(2 * steps as i32);
        assert_relative_eq!(report.empirical_ratio, discrete, max_relative = 1e-10);
        // And the continuous closed form to grid accuracy.
        let continuous = (2.0 * (a + k * att) * 1.0f64).exp();
        assert_relative_eq!(report.empirical_ratio, continuous, max_relative = 2e-3);
        assert!(report.empirical_ratio <= report.gronwall_bound);
    }

    #[test]
    fn dependence_is_noise_invariant_under_synchronous_coupling() {
        let (a, k, att) = (0.1, 0.5, 0.2);
        let det = linear_scalar_problem(a, k, att);
        let gen = DiagonalGenerator::new(vec![c(a, 0.0)]).unwrap();
        let obs = ObservationOperator::diagonal(vec![c(att, 0.0)], "attenuator").unwrap();
        let noisy = SemilinearProblem::new(
            gen,
            obs,
            DriftMap::linear(k),
            DiffusionMap::additive(HilbertSchmidtMap::scaled_identity(1, c(0.7, 0.0))),
        )
        .unwrap();
        let xi = ModeVector::from_real(&[1.0]);
        let eta = ModeVector::from_real(&[0.5]);
        let cov = TraceClassCovariance::isotropic(1, 1.0).unwrap();
        let ensemble = WienerEnsemble::new(cov, 1.0, 256, 8, 11).unwrap();
        let opts = SolveOptions::with_tol(1e-12);
        let base = estimate_dependence(&det, &xi, &eta, &ensemble, &opts).unwrap();
        let coupled = estimate_dependence(&noisy, &xi, &eta, &ensemble, &opts).unwrap();
        // Additive noise cancels path by path under coupling.
        assert_relative_eq!(
            coupled.empirical_ratio,
            base.empirical_ratio,
            max_relative = 1e-9
        );

        // Identical data short-circuits to the degenerate report.
        let same = estimate_dependence(&noisy, &xi, &xi, &ensemble, &opts).unwrap();
        assert!(same.degenerate);
        assert_eq!(same.empirical_ratio, 0.0);
    }

    fn ou_problem(sigma: f64) -> SemilinearProblem {
        let gen = DiagonalGenerator::heat(1);
        SemilinearProblem::new(
            gen,
            ObservationOperator::identity(1),
            DriftMap::zero(1),
            DiffusionMap::additive(HilbertSchmidtMap::scaled_identity(1, c(sigma, 0.0))),
        )
        .unwrap()
    }

    #[test]
    fn transition_semigroup_matches_gaussian_moments() {
        // Scalar OU: X(t) | x is Gaussian with mean e^{−t}x and variance
        // σ²(1 − e^{−2t})/2; our noise accumulation has the exact per-step
        // variance, so the estimator is unbiased for the true law.
        let problem = ou_problem(0.5);
        let phi = TestFunction::new("squared norm", 1e6, 1e6, |x| x.norm_sq()).unwrap();
        let x = ModeVector::from_real(&[1.0]);
        let cov = TraceClassCovariance::isotropic(1, 1.0).unwrap();
        let ensemble = WienerEnsemble::new(cov, 1.0, 64, 4096, 21).unwrap();
        let est = transition_semigroup(
            &problem,
            &phi,
            &x,
            1.0,
            &ensemble,
            &SolveOptions::default(),
        )
        .unwrap();
        let t = 1.0f64;
        let exact = (-2.0 * t).exp() + 0.25 * (1.0 - (-2.0 * t).exp()) / 2.0;
        assert!(
            (est.value - exact).abs() <= 3.0 * est.stderr,
            "estimate {} vs exact {exact} with stderr {}",
            est.value,
            est.stderr
        );
        assert!(est.stderr > 0.0);
    }

    #[test]
    fn transition_semigroup_trivial_cases_are_exact() {
        let problem = ou_problem(0.5);
        let x = ModeVector::from_real(&[0.3]);
        let cov = TraceClassCovariance::isotropic(1, 1.0).unwrap();
        let ensemble = WienerEnsemble::new(cov, 1.0, 16, 64, 9).unwrap();

        // Constant test function: the estimate is the constant to rounding.
        let const_phi = TestFunction::constant(0.7).unwrap();
        let est = transition_semigroup(
            &problem,
            &const_phi,
            &x,
            1.0,
            &ensemble,
            &SolveOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(est.value, 0.7, max_relative = 1e-14);
        assert!(est.stderr < 1e-15);

        // t = 0 evaluates the function, no solve.
        let phi = TestFunction::tanh_norm_sq();
        let zero = transition_semigroup(
            &problem,
            &phi,
            &x,
            0.0,
            &ensemble,
            &SolveOptions::default(),
        )
        .unwrap();
        assert_eq!(zero.value, (0.3f64 * 0.3).tanh());
        assert_eq!(zero.stderr, 0.0);

        // A sample beyond the declared bound is refused.
        let tiny = TestFunction::new("too small a bound", 1e-3, 1.0, |x| x.norm_sq()).unwrap();
        assert!(transition_semigroup(
            &problem,
            &tiny,
            &x,
            1.0,
            &ensemble,
            &SolveOptions::default()
        )
        .is_err());
    }

    #[test]
    fn feller_gaps_shrink_within_the_certified_allowance() {
        let problem = ou_problem(0.5);
        let phi = TestFunction::tanh_norm_sq();
        let x = ModeVector::from_real(&[0.4]);
        let cov = TraceClassCovariance::isotropic(1, 1.0).unwrap();
        let ensemble = WienerEnsemble::new(cov, 0.5, 32, 2048, 31).unwrap();
        let radii = [0.0, 0.5, 0.25, 0.125, 0.0625];
        let table = feller_modulus(
            &problem,
            &phi,
            &x,
            &radii,
            &ensemble,
            &SolveOptions::default(),
        )
        .unwrap();
        assert_eq!(table.rows.len(), radii.len());
        // r = 0: the coupled difference is identically zero.
        assert_eq!(table.rows[0].gap, 0.0);
        assert_eq!(table.rows[0].stderr, 0.0);
        // Gaps decrease with the radius (coupled estimates are smooth in r).
        for pair in table.rows[1..].windows(2) {
            assert!(pair[0].gap >= pair[1].gap);
        }
        // And every row honours its printed allowance (enforced inside too).
        for row in &table.rows {
            assert!(row.gap <= row.allowance);
        }
    }

    #[test]
    fn euler_maruyama_converges_to_the_semigroup_at_order_one() {
        let gen = DiagonalGenerator::heat(2);
        let problem = SemilinearProblem::new(
            gen.clone(),
            ObservationOperator::identity(2),
            DriftMap::zero(2),
            DiffusionMap::zero(2),
        )
        .unwrap();
        let xi = ModeVector::from_real(&[1.0, 0.5]);
        let cov = TraceClassCovariance::isotropic(2, 1.0).unwrap();
        let exact = semigroup_apply(&gen, 1.0, &xi).unwrap();
        let mut errors = Vec::new();
        for level in 0..3u32 {
            let steps = 32usize << level;
            let ensemble = WienerEnsemble::new(cov.clone(), 1.0, steps, 1, 2).unwrap();
            let run = euler_maruyama_path(&problem, &xi, &ensemble.path(0)).unwrap();
            assert!(!run.stiff_warning);
            errors.push(run.path.states.last().unwrap().dist(&exact));
        }
        for pair in errors.windows(2) {
            let slope = (pair[0] / pair[1]).log2();
            assert!(
                (0.9..=1.1).contains(&slope),
                "deterministic order {slope} outside [0.9, 1.1]: {errors:?}"
            );
        }
    }

    #[test]
    fn euler_maruyama_flags_and_refuses_stiff_steps() {
        let gen = DiagonalGenerator::heat(8); // max |μ| = 64
        let problem = SemilinearProblem::new(
            gen,
            ObservationOperator::identity(8),
            DriftMap::zero(8),
            DiffusionMap::zero(8),
        )
        .unwrap();
        let xi = ModeVector::from_real(&[1.0; 8]);
        let cov = TraceClassCovariance::isotropic(8, 1.0).unwrap();

        // 64·0.02 = 1.28: usable with a warning.
        let warn = WienerEnsemble::new(cov.clone(), 1.0, 50, 1, 3).unwrap();
        let run = euler_maruyama_path(&problem, &xi, &warn.path(0)).unwrap();
        assert!(run.stiff_warning);

        // 64·0.04 = 2.56: refused.
        let bad = WienerEnsemble::new(cov, 1.0, 25, 1, 3).unwrap();
        match euler_maruyama_path(&problem, &xi, &bad.path(0)) {
            Err(Error::StiffStep { stiffness, limit }) => {
                assert!(stiffness > 2.0);
                assert_eq!(limit, 2.0);
            }
            other => panic!("expected stiffness refusal, got {other:?}"),
        }
    }

    #[test]
    fn euler_maruyama_tracks_geometric_brownian_motion_at_strong_order_half() {
        // dX = aX dt + σX dW with exact solution
        // X(t) = x·exp((a − σ²/2)t + σW(t)).
        let (a, sigma) = (-0.5, 0.5);
        let gen = DiagonalGenerator::new(vec![c(a, 0.0)]).unwrap();
        let cov = TraceClassCovariance::isotropic(1, 1.0).unwrap();
        let problem = SemilinearProblem::new(
            gen,
            ObservationOperator::identity(1),
            DriftMap::zero(1),
            DiffusionMap::state_scaling(c(sigma, 0.0), &cov),
        )
        .unwrap();
        let xi = ModeVector::from_real(&[1.0]);
        let n_paths = 512;
        let mut errors = Vec::new();
        for level in 0..3u32 {
            let steps = 32usize << level;
            let ensemble = WienerEnsemble::new(cov.clone(), 1.0, steps, n_paths, 77).unwrap();
            let mut sq = 0.0;
            for i in 0..n_paths {
                let wiener = ensemble.path(i);
                let run = euler_maruyama_path(&problem, &xi, &wiener).unwrap();
                let w_t = wiener.cumulative().last().unwrap()[0];
                let exact = ((a - 0.5 * sigma * sigma) + sigma * w_t).exp();
                sq += (run.path.states.last().unwrap().coeff(0).re - exact).powi(2);
            }
            errors.push((sq / n_paths as f64).sqrt());
        }
        assert!(errors[0] > errors[1] && errors[1] > errors[2]);
        let slope = (errors[0] / errors[2]).log2() / 2.0;
        assert!(
            (0.35..=0.65).contains(&slope),
            "strong order {slope} outside [0.35, 0.65]: {errors:?}"
        );
    }

    #[test]
    fn coupled_picard_matches_the_two_level_solver() {
        let gen = DiagonalGenerator::heat(4);
        let obs = ObservationOperator::fractional(&gen, 0.25).unwrap();
        let cov = TraceClassCovariance::polynomial(4, 2.0).unwrap();
        let problem = SemilinearProblem::new(
            gen,
            obs,
            DriftMap::saturating(0.5),
            DiffusionMap::additive(HilbertSchmidtMap::scaled_identity(4, c(0.6, 0.0))),
        )
        .unwrap();
        let xi = ModeVector::from_real(&[0.8, -0.3, 0.4, 0.1]);
        let ensemble = WienerEnsemble::new(cov, 0.5, 64, 1, 13).unwrap();
        let wiener = ensemble.path(0);
        let tol = 1e-10;
        let ours = solve_semilinear_single(&problem, &xi, &wiener, &SolveOptions::with_tol(tol))
            .unwrap();
        let oracle = coupled_picard_path(&problem, &xi, &wiener, tol, 0).unwrap();
        let dist = ours.sup_dist(&oracle);
        assert!(dist < 5.0 * tol, "cross-solver distance {dist}");
    }

    #[test]
    fn coupled_picard_stops_immediately_without_drift() {
        let gen = DiagonalGenerator::heat(3);
        let cov = TraceClassCovariance::isotropic(3, 1.0).unwrap();
        let problem = SemilinearProblem::new(
            gen,
            ObservationOperator::identity(3),
            DriftMap::zero(3),
            DiffusionMap::additive(HilbertSchmidtMap::identity(3)),
        )
        .unwrap();
        let xi = ModeVector::from_real(&[1.0, 2.0, 3.0]);
        let ensemble = WienerEnsemble::new(cov, 1.0, 32, 1, 17).unwrap();
        let path = coupled_picard_path(&problem, &xi, &ensemble.path(0), 0.0, 0).unwrap();
        assert_eq!(path.iteration_increments, vec![0.0]);
    }
}
