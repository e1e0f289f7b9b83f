//! Two-level fixed-point solvers for the semilinear mild equation
//!
//!   X(t) = T(t)ξ + ∫₀ᵗ T(t−s) F(C_Λ X(s)) ds + ∫₀ᵗ T(t−s) 𝓜(u(s)) dW(s),
//!
//! closed by the outer update u ↦ X(·; u). The inner level freezes the
//! diffusion input u and contracts the drift fixed point, measured through
//! the observation operator in L² over the window; the outer level re-freezes
//! the diffusion input and contracts in mean square, uniformly in time.
//! Horizons beyond the contraction window are split into dyadic subwindows
//! solved in sequence, each restarting from the previous terminal state.
//!
//! A separate entry point handles noise fed back through an *unbounded*
//! zero-class observation operator, where the fixed-point variable is the
//! observed trajectory itself.
//!
//! Every trajectory is produced by the one shared marching kernel, so two
//! structurally equal problems — however they are posed — yield bit-identical
//! paths.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{invalid, ConvergenceDiagnostic, Error, Result, WindowCandidate};
use crate::numerics::{mean_and_stderr, pairwise_mean, pairwise_sum, uniform_grid};
use crate::path::SolutionPath;
use crate::spectral::{
    admissibility_constant, AdmissibilityReport, DiagonalGenerator, ModeVector,
    ObservationOperator,
};
use crate::stochastics::{
    mild_march, observed_march_l2_sq, HilbertSchmidtMap, StepCoeffs, TraceClassCovariance,
    WienerEnsemble, WienerPath,
};

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

/// Lipschitz drift nonlinearity F : H → H, applied to the observed state.
#[derive(Clone)]
pub struct DriftMap {
    evaluator: Arc<dyn Fn(&ModeVector) -> ModeVector + Send + Sync>,
    lipschitz: f64,
    label: String,
}

impl fmt::Debug for DriftMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftMap")
            .field("lipschitz", &self.lipschitz)
            .field("label", &self.label)
            .finish()
    }
}

impl DriftMap {
    /// Wrap an arbitrary map with a declared Lipschitz constant. The constant
    /// is taken on trust here; [`DriftMap::verify_lipschitz`] spot-checks it.
    pub fn new(
        lipschitz: f64,
        label: impl Into<String>,
        evaluator: impl Fn(&ModeVector) -> ModeVector + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(invalid("drift Lipschitz constant must be finite and ≥ 0"));
        }
        Ok(Self {
            evaluator: Arc::new(evaluator),
            lipschitz,
            label: label.into(),
        })
    }

    /// F ≡ 0 on a fixed number of modes.
    pub fn zero(modes: usize) -> Self {
        Self::new(0.0, "zero", move |_| ModeVector::zeros(modes))
            .expect("0 is a valid Lipschitz constant")
    }

    /// Constant map F ≡ value; Lipschitz constant 0.
    pub fn constant(value: ModeVector) -> Self {
        Self::new(0.0, "constant", move |_| value.clone())
            .expect("0 is a valid Lipschitz constant")
    }

    /// F(y) = scale · y; Lipschitz constant |scale|.
    pub fn linear(scale: f64) -> Self {
        Self::new(scale.abs(), "linear", move |y| y.scale_re(scale))
            .expect("|scale| is finite")
    }

    /// Componentwise saturation scale·(tanh Re z + i tanh Im z); since tanh
    /// is 1-Lipschitz in each component, the constant is |scale|.
    pub fn saturating(scale: f64) -> Self {
        Self::new(scale.abs(), "saturating", move |y| {
            y.map(|z| Complex64::new(scale * z.re.tanh(), scale * z.im.tanh()))
        })
        .expect("|scale| is finite")
    }

    pub fn eval(&self, y: &ModeVector) -> ModeVector {
        (self.evaluator)(y)
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Check the declared constant on sample pairs, with a one-ulp-scale
    /// rounding allowance.
    pub fn verify_lipschitz(&self, pairs: &[(ModeVector, ModeVector)]) -> Result<()> {
        for (x, y) in pairs {
            let lhs = self.eval(x).dist(&self.eval(y));
            let allowed = self.lipschitz * x.dist(y) * (1.0 + 1e-12);
            if lhs > allowed {
                return Err(invalid(format!(
                    "drift '{}' violates its declared Lipschitz constant {:.6e}: \
                     increment {lhs:.6e} vs allowed {allowed:.6e}",
                    self.label, self.lipschitz
                )));
            }
        }
        Ok(())
    }
}

/// Lipschitz diffusion coefficient 𝓜 : H → HS(U, H), measured in the
/// covariance-weighted Hilbert–Schmidt norm.
#[derive(Clone)]
pub struct DiffusionMap {
    evaluator: Arc<dyn Fn(&ModeVector) -> HilbertSchmidtMap + Send + Sync>,
    lipschitz: f64,
    label: String,
}

impl fmt::Debug for DiffusionMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionMap")
            .field("lipschitz", &self.lipschitz)
            .field("label", &self.label)
            .finish()
    }
}

impl DiffusionMap {
    pub fn new(
        lipschitz: f64,
        label: impl Into<String>,
        evaluator: impl Fn(&ModeVector) -> HilbertSchmidtMap + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(invalid(
                "diffusion Lipschitz constant must be finite and ≥ 0",
            ));
        }
        Ok(Self {
            evaluator: Arc::new(evaluator),
            lipschitz,
            label: label.into(),
        })
    }

    /// State-independent noise 𝓜 ≡ map; Lipschitz constant 0.
    pub fn additive(map: HilbertSchmidtMap) -> Self {
        Self::new(0.0, "additive", move |_| map.clone()).expect("0 is a valid Lipschitz constant")
    }

    /// No noise at all.
    pub fn zero(modes: usize) -> Self {
        Self::additive(HilbertSchmidtMap::scaled_identity(
            modes,
            Complex64::new(0.0, 0.0),
        ))
    }

    /// 𝓜(x) = diag(factor · x_n): multiplication by the current state. In
    /// the Q-weighted Hilbert–Schmidt norm its Lipschitz constant is
    /// |factor| · max_k √λ_k.
    pub fn state_scaling(factor: Complex64, cov: &TraceClassCovariance) -> Self {
        let top = cov.eigenvalues().iter().fold(0.0_f64, |m, &l| m.max(l));
        let lip = factor.norm() * top.sqrt();
        Self::new(lip, "state-scaling", move |x| {
            HilbertSchmidtMap::Diagonal(x.coeffs().iter().map(|z| factor * z).collect())
        })
        .expect("the scaling constant is finite")
    }

    pub fn eval(&self, x: &ModeVector) -> HilbertSchmidtMap {
        (self.evaluator)(x)
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Check the declared constant on sample pairs under a given covariance.
    pub fn verify_lipschitz(
        &self,
        cov: &TraceClassCovariance,
        pairs: &[(ModeVector, ModeVector)],
    ) -> Result<()> {
        for (x, y) in pairs {
            let lhs = hs_distance(&self.eval(x), &self.eval(y), cov)?;
            let allowed = self.lipschitz * x.dist(y) * (1.0 + 1e-12);
            if lhs > allowed {
                return Err(invalid(format!(
                    "diffusion '{}' violates its declared Lipschitz constant {:.6e}: \
                     increment {lhs:.6e} vs allowed {allowed:.6e}",
                    self.label, self.lipschitz
                )));
            }
        }
        Ok(())
    }
}

/// Q-weighted Hilbert–Schmidt distance ‖A − B‖ between two noise maps.
fn hs_distance(
    a: &HilbertSchmidtMap,
    b: &HilbertSchmidtMap,
    cov: &TraceClassCovariance,
) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(invalid("cannot compare noise maps of different shapes"));
    }
    if cov.channels() != a.cols() {
        return Err(invalid("covariance channel count does not match the maps"));
    }
    let entry = |m: &HilbertSchmidtMap, n: usize, k: usize| -> Complex64 {
        match m {
            HilbertSchmidtMap::Diagonal(d) => {
                if n == k {
                    d[n]
                } else {
                    Complex64::new(0.0, 0.0)
                }
            }
            HilbertSchmidtMap::Dense { cols, entries, .. } => entries[n * cols + k],
        }
    };
    let mut terms = Vec::with_capacity(a.rows() * a.cols());
    for n in 0..a.rows() {
        for k in 0..a.cols() {
            let d = entry(a, n, k) - entry(b, n, k);
            terms.push(cov.eigenvalues()[k] * d.norm_sqr());
        }
    }
    Ok(pairwise_sum(&terms).sqrt())
}

// ---------------------------------------------------------------------------
// Problem bundle
// ---------------------------------------------------------------------------

/// Everything that defines dX = (A X + F(C_Λ X)) dt + 𝓜(X) dW, X(0) = ξ,
/// except the initial state and the driving noise.
#[derive(Clone, Debug)]
pub struct SemilinearProblem {
    gen: DiagonalGenerator,
    obs: ObservationOperator,
    drift: DriftMap,
    diffusion: DiffusionMap,
}

impl SemilinearProblem {
    pub fn new(
        gen: DiagonalGenerator,
        obs: ObservationOperator,
        drift: DriftMap,
        diffusion: DiffusionMap,
    ) -> Result<Self> {
        if obs.mode_count() != gen.mode_count() {
            return Err(invalid("observer and generator mode counts differ"));
        }
        Ok(Self {
            gen,
            obs,
            drift,
            diffusion,
        })
    }

    pub fn generator(&self) -> &DiagonalGenerator {
        &self.gen
    }

    pub fn observer(&self) -> &ObservationOperator {
        &self.obs
    }

    pub fn drift(&self) -> &DriftMap {
        &self.drift
    }

    pub fn diffusion(&self) -> &DiffusionMap {
        &self.diffusion
    }

    /// Joint Lipschitz constant used when sizing contraction windows.
    pub fn planning_lipschitz(&self) -> f64 {
        self.drift.lipschitz().max(self.diffusion.lipschitz())
    }
}

// ---------------------------------------------------------------------------
// Window planning
// ---------------------------------------------------------------------------

/// Dyadic refinement floor: windows no smaller than horizon / 2^20 are tried.
const WINDOW_REFINEMENT_FLOOR: u32 = 20;

/// Outcome of the dyadic window search: the largest window on which both
/// fixed-point levels contract, together with the constants certifying it.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    /// Full horizon the plan covers.
    pub horizon: f64,
    /// Chosen window length T₀.
    pub window: f64,
    /// The tiling [(0, T₀), (T₀, 2T₀), …] of the horizon.
    pub windows: Vec<(f64, f64)>,
    /// Semigroup bound scale M with ‖T(t)‖ ≤ M e^{βt}.
    pub growth_scale: f64,
    /// Semigroup growth rate β.
    pub growth_rate: f64,
    /// Lipschitz constant k the plan was sized for.
    pub lipschitz: f64,
    /// Admissibility constant γ(T₀) of the observer on the window.
    pub gamma: f64,
    /// Convolution constant c(T₀) = √T₀ · γ(T₀).
    pub conv_constant: f64,
    /// Inner contraction certificate 2 c(T₀)² k² (< 1/2).
    pub picard_condition: f64,
    /// Outer contraction certificate
    /// ζ = 8 M² k⁴ e^{2|β|T₀} γ(T₀)² T₀² + 2 M² k² e^{2|β|T₀} T₀ (< 1).
    pub outer_contraction: f64,
}

/// Search the dyadic grid T, T/2, T/4, … for the largest window on which the
/// inner drift iteration and the outer diffusion update both contract.
pub fn plan_windows(
    gen: &DiagonalGenerator,
    obs: &ObservationOperator,
    lipschitz: f64,
    horizon: f64,
) -> Result<WindowPlan> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon must be finite and > 0"));
    }
    if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
        return Err(invalid("Lipschitz constant must be finite and ≥ 0"));
    }
    // Ascending dyadic grid horizon / 2^i, i = floor .. 0; one admissibility
    // sweep covers every candidate.
    let alphas: Vec<f64> = (0..=WINDOW_REFINEMENT_FLOOR)
        .rev()
        .map(|i| horizon / (1u64 << i) as f64)
        .collect();
    let report = admissibility_constant(gen, obs, &alphas, &[gen.mode_count()])?;
    let m = gen.growth_scale();
    let beta = gen.growth_rate();
    let k = lipschitz;
    let mut candidates = Vec::new();
    for i in 0..=WINDOW_REFINEMENT_FLOOR {
        let idx = (WINDOW_REFINEMENT_FLOOR - i) as usize;
        let alpha = alphas[idx];
        let gamma = report.gamma_at(idx, 0);
        let c = report.convolution_constant(idx, 0);
        let picard_condition = 2.0 * c * c * k * k;
        let grow = (2.0 * beta.abs() * alpha).exp();
        let outer_contraction = 8.0 * m * m * k.powi(4) * grow * gamma * gamma * alpha * alpha
            + 2.0 * m * m * k * k * grow * alpha;
        if picard_condition < 0.5 && outer_contraction < 1.0 {
            let count = 1usize << i;
            let windows = (0..count)
                .map(|w| {
                    (
                        horizon * w as f64 / count as f64,
                        horizon * (w + 1) as f64 / count as f64,
                    )
                })
                .collect();
            return Ok(WindowPlan {
                horizon,
                window: alpha,
                windows,
                growth_scale: m,
                growth_rate: beta,
                lipschitz: k,
                gamma,
                conv_constant: c,
                picard_condition,
                outer_contraction,
            });
        }
        candidates.push(WindowCandidate {
            window: alpha,
            picard_condition,
            outer_contraction,
        });
    }
    Err(Error::NoAdmissibleWindow {
        floor: alphas[0],
        candidates,
    })
}

// ---------------------------------------------------------------------------
// Inner Picard iteration
// ---------------------------------------------------------------------------

/// Solve the drift fixed point on one window with the diffusion input frozen:
///
///   X(t) = T(t)ξ + ∫ T(t−s) F(C_Λ X(s)) ds + ∫ T(t−s) 𝓜(u(s)) dW(s),
///
/// where u = `frozen_input` enters only through the noise table. The zeroth
/// iterate drops the drift term; each subsequent iterate is one full march
/// with the forcing re-evaluated on its predecessor. Successive iterates are
/// compared through the observation operator in L² over the window, with the
/// in-step trajectory reconstructed in closed form; the recorded
/// `iteration_increments` are those *squared* integrals. The iteration stops
/// once the increment norm is ≤ `tol` (so tol = 0 demands an exact fixed
/// point, which constant drift reaches in finitely many steps).
#[allow(clippy::too_many_arguments)]
pub fn picard_inner(
    gen: &DiagonalGenerator,
    obs: &ObservationOperator,
    drift: &DriftMap,
    diffusion: &DiffusionMap,
    frozen_input: &[ModeVector],
    xi: &ModeVector,
    wiener: &WienerPath,
    tol: f64,
    max_iter: usize,
) -> Result<SolutionPath> {
    let modes = gen.mode_count();
    if obs.mode_count() != modes {
        return Err(invalid("observer and generator mode counts differ"));
    }
    if xi.len() != modes {
        return Err(invalid("initial state mode count differs from generator"));
    }
    if !(tol >= 0.0 && tol.is_finite()) {
        return Err(invalid("tolerance must be finite and ≥ 0"));
    }
    if max_iter == 0 {
        return Err(invalid("need at least one iteration"));
    }
    let steps = wiener.steps();
    if frozen_input.len() < steps {
        return Err(invalid(format!(
            "frozen diffusion input covers {} grid points, {} steps require at least {steps}",
            frozen_input.len(),
            steps
        )));
    }
    let dt = wiener.uniform_dt()?;
    let coeffs = StepCoeffs::new(gen, dt)?;

    // The diffusion input is frozen: one noise table serves every iterate.
    let mut noise_tab = Vec::with_capacity(steps);
    for (j, u) in frozen_input.iter().take(steps).enumerate() {
        if u.len() != modes {
            return Err(invalid("frozen input mode count differs from generator"));
        }
        let g = diffusion.eval(u).apply_noise(wiener.increment(j))?;
        if g.len() != modes {
            return Err(invalid("diffusion row count must match the generator"));
        }
        noise_tab.push(g);
    }

    // Zeroth iterate: march without the drift term.
    let mut states = mild_march(&coeffs, xi, steps, |_, _| None, |j| {
        Some(noise_tab[j].clone())
    });
    let mut used_forcing = vec![ModeVector::zeros(modes); steps];
    let mut increments_sq = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let mut forcing = Vec::with_capacity(steps);
        for state in &states[..steps] {
            let f = drift.eval(&obs.apply(state)?);
            if f.len() != modes {
                return Err(invalid("drift output mode count differs from generator"));
            }
            forcing.push(f);
        }
        let next = mild_march(
            &coeffs,
            xi,
            steps,
            |j, _| Some(forcing[j].clone()),
            |j| Some(noise_tab[j].clone()),
        );
        // The difference of two marches follows the same mild recursion
        // driven by the difference of the forcings they actually used, so
        // its observed L² norm is computed by the same in-step closed form.
        let d_states: Vec<ModeVector> = next.iter().zip(&states).map(|(a, b)| a.sub(b)).collect();
        let d_forcing: Vec<ModeVector> = forcing
            .iter()
            .zip(&used_forcing)
            .map(|(a, b)| a.sub(b))
            .collect();
        let inc_sq = observed_march_l2_sq(gen, obs, &d_states, &d_forcing, dt).max(0.0);
        increments_sq.push(inc_sq);
        states = next;
        used_forcing = forcing;
        if inc_sq.sqrt() <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::ConvergenceFailure(ConvergenceDiagnostic {
            label: "inner drift fixed point".into(),
            increments: increments_sq.iter().map(|s| s.sqrt()).collect(),
            tolerance: tol,
            max_iterations: max_iter,
        }));
    }
    let observed = states
        .iter()
        .map(|x| obs.apply(x))
        .collect::<Result<Vec<_>>>()?;
    let mut path = SolutionPath::new(wiener.grid().to_vec(), states)?;
    path.observed = Some(observed);
    path.iteration_increments = increments_sq;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Outer solve
// ---------------------------------------------------------------------------

/// Where the outer iteration starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitialGuess {
    /// Start from the zero path.
    ZeroPath,
    /// Start from the drift-free path driven by 𝓜(0).
    NoiseOnly,
}

/// Knobs for [`solve_semilinear`].
#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Increment tolerance shared by both fixed-point levels. tol = 0
    /// demands exact stabilization, which the causal discrete fixed point
    /// reaches in at most steps-per-window + 1 outer rounds.
    pub tol: f64,
    /// Outer iteration budget per window; 0 resolves to steps-per-window + 8.
    pub max_outer: usize,
    /// Inner iteration budget per outer round; 0 resolves like `max_outer`.
    pub max_picard: usize,
    /// Outer starting point.
    pub initial_guess: InitialGuess,
    /// Attach observed trajectories to the returned paths.
    pub store_observed: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_outer: 0,
            max_picard: 0,
            initial_guess: InitialGuess::ZeroPath,
            store_observed: true,
        }
    }
}

impl SolveOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

/// Per-window convergence record of one [`solve_semilinear`] run.
#[derive(Clone, Debug)]
pub struct WindowReport {
    /// Window endpoints within the global horizon.
    pub window: (f64, f64),
    /// Squared ensemble-mean sup-t increments of the outer iteration.
    pub outer_increments: Vec<f64>,
    /// Largest inner iteration count across paths, per outer round.
    pub picard_iterations: Vec<usize>,
    /// Squared inner increments of path 0 during the first outer round.
    pub inner_increments: Vec<f64>,
    /// Relative a-posteriori residual of the converged window.
    pub residual: f64,
}

/// Result of [`solve_semilinear`]: one path per driving noise path plus the
/// window plan and per-window convergence diagnostics.
#[derive(Clone, Debug)]
pub struct SemilinearSolution {
    pub paths: Vec<SolutionPath>,
    pub plan: WindowPlan,
    pub window_reports: Vec<WindowReport>,
    /// Largest per-window relative residual.
    pub residual: f64,
    /// Largest ensemble-mean squared one-step jump max_j E‖X(t_{j+1}) − X(t_j)‖²,
    /// a discrete mean-square continuity modulus (reported, not adjudicated).
    pub ms_modulus: f64,
}

/// Solve the semilinear equation along every path of the ensemble. All paths
/// advance through the outer iteration in lockstep, so the stopping decision
/// (ensemble mean-square increment, uniform in time) is identical no matter
/// how the per-path work is scheduled.
pub fn solve_semilinear(
    problem: &SemilinearProblem,
    xi: &ModeVector,
    ensemble: &WienerEnsemble,
    options: &SolveOptions,
) -> Result<SemilinearSolution> {
    let wieners: Vec<WienerPath> = (0..ensemble.n_paths)
        .into_par_iter()
        .map(|i| ensemble.path(i))
        .collect();
    solve_ensemble(problem, xi, &wieners, options)
}

/// Solve along one externally supplied driving path. Streaming estimators
/// use this to couple several solves to the same noise.
pub fn solve_semilinear_single(
    problem: &SemilinearProblem,
    xi: &ModeVector,
    wiener: &WienerPath,
    options: &SolveOptions,
) -> Result<SolutionPath> {
    let mut solution = solve_ensemble(problem, xi, std::slice::from_ref(wiener), options)?;
    Ok(solution
        .paths
        .pop()
        .expect("one driving path yields one solution path"))
}

fn solve_ensemble(
    problem: &SemilinearProblem,
    xi: &ModeVector,
    wieners: &[WienerPath],
    options: &SolveOptions,
) -> Result<SemilinearSolution> {
    let gen = &problem.gen;
    let modes = gen.mode_count();
    let n_paths = wieners.len();
    if n_paths == 0 {
        return Err(invalid("need at least one driving path"));
    }
    if xi.len() != modes {
        return Err(invalid("initial state mode count differs from generator"));
    }
    if !(options.tol >= 0.0 && options.tol.is_finite()) {
        return Err(invalid("tolerance must be finite and ≥ 0"));
    }
    let steps = wieners[0].steps();
    if wieners.iter().any(|w| w.steps() != steps) {
        return Err(invalid("driving paths must share one grid"));
    }
    let horizon = *wieners[0].grid().last().expect("paths are nonempty");
    wieners[0].uniform_dt()?;

    let plan = plan_windows(gen, &problem.obs, problem.planning_lipschitz(), horizon)?;
    let window_count = plan.windows.len();
    if steps % window_count != 0 {
        return Err(invalid(format!(
            "{steps} steps cannot be tiled by {window_count} contraction windows; \
             use a step count divisible by {window_count}"
        )));
    }
    let window_steps = steps / window_count;
    let max_outer = if options.max_outer == 0 {
        window_steps + 8
    } else {
        options.max_outer
    };
    let max_picard = if options.max_picard == 0 {
        window_steps + 8
    } else {
        options.max_picard
    };
    let tol = options.tol;

    let mut current_xi: Vec<ModeVector> = vec![xi.clone(); n_paths];
    let mut global_states: Vec<Vec<ModeVector>> = vec![vec![xi.clone()]; n_paths];
    let mut window_reports: Vec<WindowReport> = Vec::with_capacity(window_count);
    let mut flat_outer: Vec<f64> = Vec::new();

    for w in 0..window_count {
        let slices: Vec<WienerPath> = wieners
            .iter()
            .map(|wp| wp.window_slice(w * window_steps, window_steps))
            .collect::<Result<_>>()?;
        let coeffs = StepCoeffs::new(gen, slices[0].uniform_dt()?)?;

        // Outer starting point u⁰ per path.
        let mut u: Vec<Vec<ModeVector>> = match options.initial_guess {
            InitialGuess::ZeroPath => {
                vec![vec![ModeVector::zeros(modes); window_steps + 1]; n_paths]
            }
            InitialGuess::NoiseOnly => {
                let at_zero = problem.diffusion.eval(&ModeVector::zeros(modes));
                slices
                    .par_iter()
                    .zip(current_xi.par_iter())
                    .map(|(sl, x0)| -> Result<Vec<ModeVector>> {
                        let mut tab = Vec::with_capacity(window_steps);
                        for j in 0..window_steps {
                            tab.push(at_zero.apply_noise(sl.increment(j))?);
                        }
                        Ok(mild_march(&coeffs, x0, window_steps, |_, _| None, |j| {
                            Some(tab[j].clone())
                        }))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };

        let mut outer_increments = Vec::new();
        let mut picard_iterations = Vec::new();
        let mut inner_increments = Vec::new();
        let mut converged = false;

        for outer in 0..max_outer {
            let results: Vec<SolutionPath> = (0..n_paths)
                .into_par_iter()
                .map(|i| {
                    picard_inner(
                        gen,
                        &problem.obs,
                        &problem.drift,
                        &problem.diffusion,
                        &u[i],
                        &current_xi[i],
                        &slices[i],
                        tol,
                        max_picard,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            if outer == 0 {
                inner_increments = results[0].iteration_increments.clone();
            }
            picard_iterations.push(
                results
                    .iter()
                    .map(|p| p.iteration_increments.len())
                    .max()
                    .unwrap_or(0),
            );

            // Ensemble mean-square increment against the frozen input,
            // uniform in time. The Monte-Carlo standard error is folded into
            // the allowance but capped at the tolerance scale — an increment
            // that is merely *noisy* must keep iterating — and at tol = 0 the
            // stop demands exactness.
            let mut sup_sq = f64::NEG_INFINITY;
            let mut sup_se = 0.0;
            let mut col = vec![0.0; n_paths];
            for j in 0..=window_steps {
                for (i, path) in results.iter().enumerate() {
                    let d = path.states[j].dist(&u[i][j]);
                    col[i] = d * d;
                }
                let (mean, se) = mean_and_stderr(&col);
                if mean > sup_sq {
                    sup_sq = mean;
                    sup_se = se;
                }
            }
            outer_increments.push(sup_sq);
            for (ui, path) in u.iter_mut().zip(results) {
                *ui = path.states;
            }
            let allowance = tol * tol + 3.0 * sup_se.min(tol * tol);
            if sup_sq <= allowance {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::ConvergenceFailure(ConvergenceDiagnostic {
                label: "outer diffusion update".into(),
                increments: outer_increments.iter().map(|s| s.sqrt()).collect(),
                tolerance: tol,
                max_iterations: max_outer,
            }));
        }

        // A-posteriori residual: one more march with every coefficient taken
        // from the converged states must reproduce them.
        let residual_parts: Vec<(Vec<f64>, Vec<f64>)> = (0..n_paths)
            .into_par_iter()
            .map(|i| -> Result<(Vec<f64>, Vec<f64>)> {
                let x = &u[i];
                let mut forcing = Vec::with_capacity(window_steps);
                let mut noise = Vec::with_capacity(window_steps);
                for j in 0..window_steps {
                    forcing.push(problem.drift.eval(&problem.obs.apply(&x[j])?));
                    noise.push(
                        problem
                            .diffusion
                            .eval(&x[j])
                            .apply_noise(slices[i].increment(j))?,
                    );
                }
                let r = mild_march(
                    &coeffs,
                    &current_xi[i],
                    window_steps,
                    |j, _| Some(forcing[j].clone()),
                    |j| Some(noise[j].clone()),
                );
                let num = (0..=window_steps)
                    .map(|j| {
                        let d = r[j].dist(&x[j]);
                        d * d
                    })
                    .collect();
                let den = (0..=window_steps).map(|j| x[j].norm_sq()).collect();
                Ok((num, den))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut res_num = 0.0_f64;
        let mut res_den = 0.0_f64;
        let mut col = vec![0.0; n_paths];
        for j in 0..=window_steps {
            for (i, (num, _)) in residual_parts.iter().enumerate() {
                col[i] = num[j];
            }
            res_num = res_num.max(pairwise_mean(&col));
            for (i, (_, den)) in residual_parts.iter().enumerate() {
                col[i] = den[j];
            }
            res_den = res_den.max(pairwise_mean(&col));
        }
        let residual = if res_num == 0.0 {
            0.0
        } else {
            res_num.sqrt() / res_den.sqrt().max(f64::MIN_POSITIVE)
        };
        let allowance = 10.0 * tol;
        if residual > allowance {
            return Err(Error::ResidualTooLarge {
                residual,
                allowance,
            });
        }

        flat_outer.extend(outer_increments.iter().copied());
        window_reports.push(WindowReport {
            window: plan.windows[w],
            outer_increments,
            picard_iterations,
            inner_increments,
            residual,
        });

        // Chain: the next window restarts from the terminal states.
        for (xi_i, ui) in current_xi.iter_mut().zip(u.iter_mut()) {
            *xi_i = ui[window_steps].clone();
        }
        for (global, ui) in global_states.iter_mut().zip(u) {
            global.extend(ui.into_iter().skip(1));
        }
    }

    let grid = uniform_grid(horizon, steps);
    let residual = window_reports
        .iter()
        .map(|r| r.residual)
        .fold(0.0_f64, f64::max);

    let mut ms_modulus = 0.0_f64;
    let mut col = vec![0.0; n_paths];
    for j in 0..steps {
        for (i, states) in global_states.iter().enumerate() {
            let d = states[j + 1].dist(&states[j]);
            col[i] = d * d;
        }
        ms_modulus = ms_modulus.max(pairwise_mean(&col));
    }

    let paths = global_states
        .into_par_iter()
        .map(|states| -> Result<SolutionPath> {
            let observed = if options.store_observed {
                Some(
                    states
                        .iter()
                        .map(|x| problem.obs.apply(x))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            let mut path = SolutionPath::new(grid.clone(), states)?;
            path.observed = observed;
            path.iteration_increments = flat_outer.clone();
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SemilinearSolution {
        paths,
        plan,
        window_reports,
        residual,
        ms_modulus,
    })
}

// ---------------------------------------------------------------------------
// Multiplicative noise through an unbounded observation operator
// ---------------------------------------------------------------------------

/// Result of [`solve_multiplicative_unbounded`]. Each path's `observed`
/// component carries the feedback trajectory B_Λ X on the grid.
#[derive(Clone, Debug)]
pub struct MultiplicativeSolution {
    pub paths: Vec<SolutionPath>,
    /// Zero-class scan that admitted the feedback operator.
    pub report: Box<AdmissibilityReport>,
    /// Chosen contraction window length.
    pub window: f64,
    /// Window tiling of the horizon.
    pub windows: Vec<(f64, f64)>,
    /// Admissibility constant γ̃ of the feedback operator on the window.
    pub gamma_tilde: f64,
    /// Certified contraction factor k · γ̃ (< 1).
    pub contraction: f64,
    /// Largest per-window relative residual.
    pub residual: f64,
}

/// Solve dX = A X dt + 𝓜(B_Λ X) dW for a feedback operator B that may be
/// unbounded, provided it is zero-class admissible and not divergent across
/// truncation levels. The fixed-point variable is the observed trajectory
/// u = B_Λ X itself: each round marches X from the frozen u and re-observes.
#[allow(clippy::too_many_arguments)]
pub fn solve_multiplicative_unbounded(
    gen: &DiagonalGenerator,
    feedback: &ObservationOperator,
    diffusion: &DiffusionMap,
    xi: &ModeVector,
    ensemble: &WienerEnsemble,
    tol: f64,
    max_iter: usize,
) -> Result<MultiplicativeSolution> {
    let modes = gen.mode_count();
    if feedback.mode_count() != modes {
        return Err(invalid("feedback operator and generator mode counts differ"));
    }
    if xi.len() != modes {
        return Err(invalid("initial state mode count differs from generator"));
    }
    if !(tol >= 0.0 && tol.is_finite()) {
        return Err(invalid("tolerance must be finite and ≥ 0"));
    }
    let horizon = ensemble.horizon;
    let steps = ensemble.steps;
    let max_iter = if max_iter == 0 { 256 } else { max_iter };

    // Admissibility gate: γ̃(α) must decay towards small horizons (five
    // decades scanned) and must not grow across truncation levels.
    let scan_alphas: Vec<f64> = (0..6).map(|d| horizon * 10f64.powi(d - 5)).collect();
    let mut scan_levels: Vec<usize> = [modes / 16, modes / 4, modes]
        .into_iter()
        .filter(|&l| l >= 1)
        .collect();
    scan_levels.dedup();
    let report = admissibility_constant(gen, feedback, &scan_alphas, &scan_levels)?;
    if !report.zero_class || report.divergent {
        return Err(Error::NotZeroClass(Box::new(report)));
    }

    // Window search: the feedback fixed point contracts at rate k·γ̃(α).
    let alphas: Vec<f64> = (0..=WINDOW_REFINEMENT_FLOOR)
        .rev()
        .map(|i| horizon / (1u64 << i) as f64)
        .collect();
    let win_report = admissibility_constant(gen, feedback, &alphas, &[modes])?;
    let k = diffusion.lipschitz();
    let mut chosen = None;
    let mut candidates = Vec::new();
    for i in 0..=WINDOW_REFINEMENT_FLOOR {
        let idx = (WINDOW_REFINEMENT_FLOOR - i) as usize;
        let gamma_tilde = win_report.gamma_at(idx, 0);
        let contraction = k * gamma_tilde;
        if contraction < 1.0 {
            chosen = Some((i, idx, gamma_tilde, contraction));
            break;
        }
        candidates.push(WindowCandidate {
            window: alphas[idx],
            picard_condition: 0.0,
            outer_contraction: contraction,
        });
    }
    let Some((split, idx, gamma_tilde, contraction)) = chosen else {
        return Err(Error::NoAdmissibleWindow {
            floor: alphas[0],
            candidates,
        });
    };
    let window = alphas[idx];
    let window_count = 1usize << split;
    if steps % window_count != 0 {
        return Err(invalid(format!(
            "{steps} steps cannot be tiled by {window_count} contraction windows; \
             use a step count divisible by {window_count}"
        )));
    }
    let window_steps = steps / window_count;
    let windows: Vec<(f64, f64)> = (0..window_count)
        .map(|w| {
            (
                horizon * w as f64 / window_count as f64,
                horizon * (w + 1) as f64 / window_count as f64,
            )
        })
        .collect();

    let wieners: Vec<WienerPath> = (0..ensemble.n_paths)
        .into_par_iter()
        .map(|i| ensemble.path(i))
        .collect();
    let n_paths = wieners.len();

    let mut current_xi = vec![xi.clone(); n_paths];
    let mut global_states: Vec<Vec<ModeVector>> = vec![vec![xi.clone()]; n_paths];
    let mut global_observed: Vec<Vec<ModeVector>> =
        vec![vec![feedback.apply(xi)?]; n_paths];
    let mut flat_outer: Vec<f64> = Vec::new();
    let mut worst_residual = 0.0_f64;

    for w in 0..window_count {
        let slices: Vec<WienerPath> = wieners
            .iter()
            .map(|wp| wp.window_slice(w * window_steps, window_steps))
            .collect::<Result<_>>()?;
        let coeffs = StepCoeffs::new(gen, slices[0].uniform_dt()?)?;
        let dt = coeffs.dt();

        let march_round = |u: &[Vec<ModeVector>]| -> Result<Vec<(Vec<ModeVector>, Vec<ModeVector>, f64)>> {
            (0..n_paths)
                .into_par_iter()
                .map(|i| -> Result<(Vec<ModeVector>, Vec<ModeVector>, f64)> {
                    let mut tab = Vec::with_capacity(window_steps);
                    for j in 0..window_steps {
                        let g = diffusion.eval(&u[i][j]).apply_noise(slices[i].increment(j))?;
                        if g.len() != modes {
                            return Err(invalid("diffusion row count must match the generator"));
                        }
                        tab.push(g);
                    }
                    let x = mild_march(&coeffs, &current_xi[i], window_steps, |_, _| None, |j| {
                        Some(tab[j].clone())
                    });
                    let mut observed = Vec::with_capacity(window_steps + 1);
                    for s in &x {
                        observed.push(feedback.apply(s)?);
                    }
                    if observed.iter().any(|y| !y.is_finite()) {
                        return Err(invalid(
                            "observed iterate overflowed; the feedback is too strong \
                             for this truncation",
                        ));
                    }
                    // Squared L² time increment of the observed trajectory
                    // against the frozen input, left-endpoint rule.
                    let inc: Vec<f64> = (0..window_steps)
                        .map(|j| {
                            let d = observed[j].dist(&u[i][j]);
                            d * d * dt
                        })
                        .collect();
                    Ok((x, observed, pairwise_sum(&inc)))
                })
                .collect()
        };

        let mut u: Vec<Vec<ModeVector>> =
            vec![vec![ModeVector::zeros(modes); window_steps + 1]; n_paths];
        let mut states: Vec<Vec<ModeVector>> = Vec::new();
        let mut outer_increments = Vec::new();
        let mut converged = false;
        for _ in 0..max_iter {
            let round = march_round(&u)?;
            let incs: Vec<f64> = round.iter().map(|(_, _, s)| *s).collect();
            let (mean_sq, se) = mean_and_stderr(&incs);
            outer_increments.push(mean_sq);
            states = Vec::with_capacity(n_paths);
            for (i, (x, observed, _)) in round.into_iter().enumerate() {
                u[i] = observed;
                states.push(x);
            }
            let allowance = tol * tol + 3.0 * se.min(tol * tol);
            if mean_sq <= allowance {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::ConvergenceFailure(ConvergenceDiagnostic {
                label: "multiplicative feedback fixed point".into(),
                increments: outer_increments.iter().map(|s| s.sqrt()).collect(),
                tolerance: tol,
                max_iterations: max_iter,
            }));
        }

        // A-posteriori residual: one more round from the converged
        // observation, relative to the observed trajectory's own scale.
        let round = march_round(&u)?;
        let incs: Vec<f64> = round.iter().map(|(_, _, s)| *s).collect();
        let (num_mean, _) = mean_and_stderr(&incs);
        let scales: Vec<f64> = u
            .iter()
            .map(|ui| {
                let terms: Vec<f64> = (0..window_steps).map(|j| ui[j].norm_sq() * dt).collect();
                pairwise_sum(&terms)
            })
            .collect();
        let (den_mean, _) = mean_and_stderr(&scales);
        let residual = if num_mean <= 0.0 {
            0.0
        } else {
            num_mean.sqrt() / den_mean.sqrt().max(f64::MIN_POSITIVE)
        };
        let allowance = 10.0 * tol;
        if residual > allowance {
            return Err(Error::ResidualTooLarge {
                residual,
                allowance,
            });
        }
        worst_residual = worst_residual.max(residual);
        flat_outer.extend(outer_increments);

        for (xi_i, states_i) in current_xi.iter_mut().zip(&states) {
            *xi_i = states_i[window_steps].clone();
        }
        for (global, states_i) in global_states.iter_mut().zip(states) {
            global.extend(states_i.into_iter().skip(1));
        }
        for (global, observed_i) in global_observed.iter_mut().zip(u) {
            global.extend(observed_i.into_iter().skip(1));
        }
    }

    let grid = uniform_grid(horizon, steps);
    let paths = global_states
        .into_iter()
        .zip(global_observed)
        .map(|(states, observed)| -> Result<SolutionPath> {
            let mut path = SolutionPath::new(grid.clone(), states)?;
            path.observed = Some(observed);
            path.iteration_increments = flat_outer.clone();
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(MultiplicativeSolution {
        paths,
        report: Box::new(report),
        window,
        windows,
        gamma_tilde,
        contraction,
        residual: worst_residual,
    })
}
