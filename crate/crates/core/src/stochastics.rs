//! Trace-class Wiener noise and exact exponential integrators for
//! deterministic and stochastic convolutions against the semigroup.
//!
//! Sampling is counter-based: every path is a pure function of
//! (covariance, grid, seed, path index), so ensembles can be generated in
//! any order, on any number of threads, with bit-identical results.
//!
//! The marching kernel is shared by every solver in this crate. One step of
//! size Δt updates each mode through a single accumulator:
//!
//! ```text
//! x_n ← e^{μ_n Δt} x_n  +  Δt φ₁(μ_n Δt) f_n  +  s_n (Φ ΔW)_n,
//! s_n = √( ∫₀^Δt e^{2 Re μ_n τ} dτ / Δt ),
//! ```
//!
//! which is exact for piecewise-constant forcing and reproduces the exact
//! per-mode variance of the stochastic convolution at every grid point (the
//! per-step noise lump carries the true Ornstein–Uhlenbeck conditional
//! variance instead of the naive Δt scaling).

use crate::error::{invalid, Result};
use crate::numerics::{
    growth_integral, growth_integral_antiderivative, mild_step_sq_integral,
    pairwise_sum, phi1, uniform_grid,
};
use crate::path::SolutionPath;
use crate::spectral::{
    admissibility_constant, DiagonalGenerator, ModeVector, ObservationAction,
    ObservationOperator,
};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

// ---------------------------------------------------------------------------
// Covariance and Wiener paths
// ---------------------------------------------------------------------------

/// Diagonal trace-class covariance of the driving Wiener process: noise
/// channel k carries variance rate λ_k ≥ 0.
#[derive(Debug, Clone)]
pub struct TraceClassCovariance {
    eigenvalues: Vec<f64>,
}

impl TraceClassCovariance {
    pub fn new(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(invalid("covariance needs at least one channel"));
        }
        if eigenvalues.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(invalid("covariance eigenvalues must be finite and ≥ 0"));
        }
        Ok(Self { eigenvalues })
    }

    /// λ_k = strength for every channel.
    pub fn isotropic(channels: usize, strength: f64) -> Result<Self> {
        Self::new(vec![strength; channels])
    }

    /// λ_k = k^{−decay}, k = 1..channels.
    pub fn polynomial(channels: usize, decay: f64) -> Result<Self> {
        Self::new(
            (1..=channels)
                .map(|k| (k as f64).powf(-decay))
                .collect(),
        )
    }

    pub fn channels(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// tr Q = Σ_k λ_k.
    pub fn trace(&self) -> f64 {
        pairwise_sum(&self.eigenvalues)
    }
}

/// One sampled Wiener path: per-step, per-channel increments with
/// Var(ΔW_k over step j) = λ_k (t_{j+1} − t_j).
#[derive(Debug, Clone)]
pub struct WienerPath {
    grid: Vec<f64>,
    /// increments[j][k], step-major.
    increments: Vec<Vec<f64>>,
    seed: u64,
    path_index: u64,
}

impl WienerPath {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    pub fn channels(&self) -> usize {
        self.increments.first().map_or(0, Vec::len)
    }

    pub fn increment(&self, step: usize) -> &[f64] {
        &self.increments[step]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    pub fn step_size(&self, step: usize) -> f64 {
        self.grid[step + 1] - self.grid[step]
    }

    /// Grid spacing, provided the grid is uniform; error otherwise. The
    /// tolerance admits accumulated rounding of t_j = j·Δt over long grids
    /// while rejecting genuinely graded grids.
    pub fn uniform_dt(&self) -> Result<f64> {
        let dt = self.grid[1] - self.grid[0];
        for j in 1..self.steps() {
            if (self.step_size(j) - dt).abs() > 1e-9 * dt.max(1e-300) {
                return Err(invalid("wiener grid is not uniform"));
            }
        }
        Ok(dt)
    }

    /// Restrict to `steps` increments starting at `start_step`, with the
    /// local clock reset to 0. The sliced grid is rebuilt as j·Δt so the
    /// spacing is bitwise identical to the parent's leading spacing.
    pub fn window_slice(&self, start_step: usize, steps: usize) -> Result<WienerPath> {
        if steps == 0 || start_step + steps > self.steps() {
            return Err(invalid(format!(
                "cannot slice steps {start_step}..{} out of {}",
                start_step + steps,
                self.steps()
            )));
        }
        let dt = self.uniform_dt()?;
        Ok(WienerPath {
            grid: (0..=steps).map(|j| dt * j as f64).collect(),
            increments: self.increments[start_step..start_step + steps].to_vec(),
            seed: self.seed,
            path_index: self.path_index,
        })
    }

    /// Cumulative sums W(t_j) per channel, W(0) = 0.
    pub fn cumulative(&self) -> Vec<Vec<f64>> {
        let channels = self.channels();
        let mut out = Vec::with_capacity(self.grid.len());
        out.push(vec![0.0; channels]);
        let mut acc = vec![0.0; channels];
        for step in &self.increments {
            for (a, d) in acc.iter_mut().zip(step) {
                *a += d;
            }
            out.push(acc.clone());
        }
        out
    }

    /// Merge consecutive blocks of `factor` increments; the coarse path is
    /// the exact restriction of this path to every factor-th grid point.
    pub fn coarsen(&self, factor: usize) -> Result<WienerPath> {
        if factor == 0 || self.steps() % factor != 0 {
            return Err(invalid(format!(
                "cannot coarsen {} steps by factor {factor}",
                self.steps()
            )));
        }
        let channels = self.channels();
        let coarse_steps = self.steps() / factor;
        let mut increments = Vec::with_capacity(coarse_steps);
        let mut grid = Vec::with_capacity(coarse_steps + 1);
        grid.push(self.grid[0]);
        for block in 0..coarse_steps {
            let mut merged = vec![0.0; channels];
            for sub in 0..factor {
                for (m, d) in merged.iter_mut().zip(&self.increments[block * factor + sub]) {
                    *m += d;
                }
            }
            increments.push(merged);
            grid.push(self.grid[(block + 1) * factor]);
        }
        Ok(WienerPath {
            grid,
            increments,
            seed: self.seed,
            path_index: self.path_index,
        })
    }
}

/// Sample one Wiener path on a strictly increasing grid starting at 0.
///
/// The generator is counter-based: the same (covariance, grid, seed,
/// path_index) always reproduces the path bit for bit, and distinct path
/// indices use statistically independent streams.
pub fn sample_wiener(
    cov: &TraceClassCovariance,
    grid: &[f64],
    seed: u64,
    path_index: u64,
) -> Result<WienerPath> {
    if grid.len() < 2 {
        return Err(invalid("wiener grid needs at least two points"));
    }
    if grid[0] != 0.0 {
        return Err(invalid("wiener grid must start at 0"));
    }
    if grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("wiener grid must be finite and strictly increasing"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    let scales_unit: Vec<f64> = cov.eigenvalues().iter().map(|&l| l.sqrt()).collect();
    let mut increments = Vec::with_capacity(grid.len() - 1);
    for w in grid.windows(2) {
        let sqrt_dt = (w[1] - w[0]).sqrt();
        let mut step = Vec::with_capacity(scales_unit.len());
        for &scale in &scales_unit {
            let z: f64 = StandardNormal.sample(&mut rng);
            step.push(scale * sqrt_dt * z);
        }
        increments.push(step);
    }
    Ok(WienerPath {
        grid: grid.to_vec(),
        increments,
        seed,
        path_index,
    })
}

/// Lazy ensemble of independent Wiener paths on a shared uniform grid.
#[derive(Debug, Clone)]
pub struct WienerEnsemble {
    pub cov: TraceClassCovariance,
    pub horizon: f64,
    pub steps: usize,
    pub n_paths: usize,
    pub seed: u64,
}

impl WienerEnsemble {
    pub fn new(
        cov: TraceClassCovariance,
        horizon: f64,
        steps: usize,
        n_paths: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid("ensemble horizon must be finite and > 0"));
        }
        if steps == 0 || n_paths == 0 {
            return Err(invalid("ensemble needs at least one step and one path"));
        }
        Ok(Self {
            cov,
            horizon,
            steps,
            n_paths,
            seed,
        })
    }

    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(self.horizon, self.steps)
    }

    /// Materialize path `index` (0-based); a pure function of the ensemble
    /// parameters and the index.
    pub fn path(&self, index: usize) -> WienerPath {
        sample_wiener(&self.cov, &self.grid(), self.seed, index as u64)
            .expect("ensemble grids are validated at construction")
    }
}

// ---------------------------------------------------------------------------
// Hilbert–Schmidt diffusion maps
// ---------------------------------------------------------------------------

/// Linear map from noise channels to state modes, Φ: ℝ^K → state space.
#[derive(Debug, Clone)]
pub enum HilbertSchmidtMap {
    /// (Φ w)_n = d_n w_n; requires K = N.
    Diagonal(Vec<Complex64>),
    /// Dense N×K mode table, row-major.
    Dense {
        rows: usize,
        cols: usize,
        entries: Vec<Complex64>,
    },
}

impl HilbertSchmidtMap {
    pub fn diagonal(entries: Vec<Complex64>) -> Result<Self> {
        if entries
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(invalid("diffusion entries must be finite"));
        }
        Ok(Self::Diagonal(entries))
    }

    pub fn identity(modes: usize) -> Self {
        Self::Diagonal(vec![Complex64::new(1.0, 0.0); modes])
    }

    pub fn scaled_identity(modes: usize, factor: Complex64) -> Self {
        Self::Diagonal(vec![factor; modes])
    }

    pub fn dense(rows: usize, cols: usize, entries: Vec<Complex64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(invalid(format!(
                "dense diffusion needs {rows}×{cols} entries, got {}",
                entries.len()
            )));
        }
        if entries
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(invalid("diffusion entries must be finite"));
        }
        Ok(Self::Dense {
            rows,
            cols,
            entries,
        })
    }

    /// Output dimension (state modes).
    pub fn rows(&self) -> usize {
        match self {
            Self::Diagonal(d) => d.len(),
            Self::Dense { rows, .. } => *rows,
        }
    }

    /// Input dimension (noise channels).
    pub fn cols(&self) -> usize {
        match self {
            Self::Diagonal(d) => d.len(),
            Self::Dense { cols, .. } => *cols,
        }
    }

    /// Map a per-channel noise increment into the state space.
    pub fn apply_noise(&self, dw: &[f64]) -> Result<ModeVector> {
        if dw.len() != self.cols() {
            return Err(invalid(format!(
                "diffusion expects {} channels, got {}",
                self.cols(),
                dw.len()
            )));
        }
        let coeffs = match self {
            Self::Diagonal(d) => d.iter().zip(dw).map(|(dn, w)| dn * *w).collect::<Vec<_>>(),
            Self::Dense {
                rows,
                cols,
                entries,
            } => {
                let mut out = vec![Complex64::new(0.0, 0.0); *rows];
                for (n, o) in out.iter_mut().enumerate() {
                    let row = &entries[n * cols..(n + 1) * cols];
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (e, w) in row.iter().zip(dw) {
                        acc += e * *w;
                    }
                    *o = acc;
                }
                out
            }
        };
        ModeVector::new(coeffs)
    }

    /// Covariance-weighted Hilbert–Schmidt norm (Σ_k λ_k ‖Φ e_k‖²)^{1/2},
    /// accumulated in a fixed deterministic order.
    pub fn hs_norm(&self, cov: &TraceClassCovariance) -> Result<f64> {
        if cov.channels() != self.cols() {
            return Err(invalid(format!(
                "diffusion has {} channels, covariance has {}",
                self.cols(),
                cov.channels()
            )));
        }
        let per_channel: Vec<f64> = match self {
            Self::Diagonal(d) => cov
                .eigenvalues()
                .iter()
                .zip(d)
                .map(|(l, dn)| l * dn.norm_sqr())
                .collect(),
            Self::Dense {
                rows,
                cols,
                entries,
            } => (0..*cols)
                .map(|k| {
                    let col_sq: Vec<f64> = (0..*rows)
                        .map(|n| entries[n * cols + k].norm_sqr())
                        .collect();
                    cov.eigenvalues()[k] * pairwise_sum(&col_sq)
                })
                .collect(),
        };
        Ok(pairwise_sum(&per_channel).max(0.0).sqrt())
    }

    /// Per-output-mode noise intensity q_n = Σ_k λ_k |Φ_{nk}|².
    pub fn row_weights(&self, cov: &TraceClassCovariance) -> Result<Vec<f64>> {
        if cov.channels() != self.cols() {
            return Err(invalid("diffusion/covariance channel mismatch"));
        }
        Ok(match self {
            Self::Diagonal(d) => d
                .iter()
                .zip(cov.eigenvalues())
                .map(|(dn, l)| l * dn.norm_sqr())
                .collect(),
            Self::Dense {
                rows,
                cols,
                entries,
            } => (0..*rows)
                .map(|n| {
                    let terms: Vec<f64> = (0..*cols)
                        .map(|k| cov.eigenvalues()[k] * entries[n * cols + k].norm_sqr())
                        .collect();
                    pairwise_sum(&terms)
                })
                .collect(),
        })
    }
}

/// Diffusion coefficient over a march: either one map for all steps or an
/// explicit per-step table (entry j may only use information up to t_j).
#[derive(Debug, Clone)]
pub enum DiffusionTable {
    Constant(HilbertSchmidtMap),
    PerStep(Vec<HilbertSchmidtMap>),
}

impl DiffusionTable {
    pub fn map_at(&self, step: usize) -> &HilbertSchmidtMap {
        match self {
            Self::Constant(m) => m,
            Self::PerStep(table) => &table[step],
        }
    }

    /// A per-step table must cover exactly the march it is used with;
    /// anything else indicates a non-adapted construction.
    pub fn check_steps(&self, steps: usize) -> Result<()> {
        match self {
            Self::Constant(_) => Ok(()),
            Self::PerStep(table) if table.len() == steps => Ok(()),
            Self::PerStep(table) => Err(invalid(format!(
                "diffusion table has {} entries for {steps} steps; \
                 a step-indexed table must be built step for step",
                table.len()
            ))),
        }
    }

    /// ∫₀^T ‖Φ(t)‖₂² dt for the piecewise-constant-in-time table.
    pub fn hs_sq_time_integral(
        &self,
        cov: &TraceClassCovariance,
        dt: f64,
        steps: usize,
    ) -> Result<f64> {
        match self {
            Self::Constant(m) => {
                let h = m.hs_norm(cov)?;
                Ok(h * h * dt * steps as f64)
            }
            Self::PerStep(table) => {
                let mut terms = Vec::with_capacity(steps);
                for m in table {
                    let h = m.hs_norm(cov)?;
                    terms.push(h * h * dt);
                }
                Ok(pairwise_sum(&terms))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Shared exponential-Euler step kernel
// ---------------------------------------------------------------------------

/// Precomputed per-mode coefficients of one exponential-Euler step.
#[derive(Debug, Clone)]
pub struct StepCoeffs {
    dt: f64,
    exp_dt: Vec<Complex64>,
    drift_weight: Vec<Complex64>,
    noise_scale: Vec<f64>,
}

impl StepCoeffs {
    pub fn new(gen: &DiagonalGenerator, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("step size must be finite and > 0"));
        }
        let mut exp_dt = Vec::with_capacity(gen.mode_count());
        let mut drift_weight = Vec::with_capacity(gen.mode_count());
        let mut noise_scale = Vec::with_capacity(gen.mode_count());
        for mu in gen.eigenvalues() {
            exp_dt.push((mu * dt).exp());
            drift_weight.push(phi1(mu * dt) * dt);
            noise_scale.push((growth_integral(mu.re, dt) / dt).sqrt());
        }
        Ok(Self {
            dt,
            exp_dt,
            drift_weight,
            noise_scale,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn modes(&self) -> usize {
        self.exp_dt.len()
    }
}

/// One shared marching step. Every solver in this crate funnels through this
/// kernel with the same per-mode accumulation order, so structurally equal
/// problems produce bit-identical trajectories.
pub(crate) fn advance(
    coeffs: &StepCoeffs,
    state: &mut ModeVector,
    forcing: Option<&ModeVector>,
    noise: Option<&ModeVector>,
) {
    let xs = state.coeffs_mut();
    for n in 0..xs.len() {
        let mut acc = coeffs.exp_dt[n] * xs[n];
        if let Some(f) = forcing {
            acc += coeffs.drift_weight[n] * f.coeff(n);
        }
        if let Some(g) = noise {
            acc += g.coeff(n) * coeffs.noise_scale[n];
        }
        xs[n] = acc;
    }
}

/// March `steps` exponential-Euler steps from `x0`. The forcing closure
/// receives the step index and the state at the step's left endpoint; the
/// noise closure receives the step index and returns the mapped increment
/// Φ ΔW for that step (before the exact-variance rescaling).
pub(crate) fn mild_march(
    coeffs: &StepCoeffs,
    x0: &ModeVector,
    steps: usize,
    mut forcing: impl FnMut(usize, &ModeVector) -> Option<ModeVector>,
    mut noise: impl FnMut(usize) -> Option<ModeVector>,
) -> Vec<ModeVector> {
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.clone());
    let mut current = x0.clone();
    for j in 0..steps {
        let f = forcing(j, &current);
        let g = noise(j);
        advance(coeffs, &mut current, f.as_ref(), g.as_ref());
        states.push(current.clone());
    }
    states
}

// ---------------------------------------------------------------------------
// Deterministic convolution
// ---------------------------------------------------------------------------

/// Convolve the semigroup with a step-indexed forcing:
/// D(t) = ∫₀^t T(t−s) F(s) ds, with F constant on each grid step.
/// The per-mode update is exact, so grid values match the continuous
/// convolution of the piecewise-constant forcing to rounding error.
pub fn det_convolution(
    gen: &DiagonalGenerator,
    horizon: f64,
    steps: usize,
    mut forcing: impl FnMut(usize) -> ModeVector,
) -> Result<SolutionPath> {
    if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
        return Err(invalid("convolution needs a positive horizon and ≥ 1 step"));
    }
    let coeffs = StepCoeffs::new(gen, horizon / steps as f64)?;
    let x0 = ModeVector::zeros(gen.mode_count());
    let states = mild_march(
        &coeffs,
        &x0,
        steps,
        |j, _| {
            let f = forcing(j);
            assert_eq!(f.len(), coeffs.modes(), "forcing mode count mismatch");
            Some(f)
        },
        |_| None,
    );
    SolutionPath::new(uniform_grid(horizon, steps), states)
}

/// Outcome of the observed deterministic convolution: the observed path and
/// both sides of the admissibility convolution bound
/// ‖C_Λ (T ∗ F)‖_{L²(0,α)} ≤ √α γ(α) ‖F‖_{L²(0,α)}.
#[derive(Debug, Clone)]
pub struct ConvolutionCheck {
    /// Convolution states with the observed trajectory attached.
    pub path: SolutionPath,
    /// ‖C_Λ (T ∗ F)‖_{L²(0,α)}, integrated exactly step by step.
    pub lhs: f64,
    /// ‖F‖_{L²(0,α)} of the piecewise-constant forcing.
    pub forcing_l2: f64,
    /// Admissibility constant γ(α) at the working truncation.
    pub gamma: f64,
    /// Convolution constant c(α) = √α γ(α).
    pub bound_constant: f64,
    /// Right-hand side c(α) ‖F‖.
    pub rhs: f64,
    /// lhs/rhs, defined as 0 when the forcing vanishes.
    pub ratio: f64,
}

/// Convolve, observe through C, and evaluate both sides of the convolution
/// bound. For diagonal observers the time integral on the left is computed
/// in closed form within every step; dense-kernel observers use panelwise
/// Gauss–Legendre on the exact in-step trajectory.
pub fn observed_det_convolution(
    gen: &DiagonalGenerator,
    obs: &ObservationOperator,
    horizon: f64,
    steps: usize,
    mut forcing: impl FnMut(usize) -> ModeVector,
) -> Result<ConvolutionCheck> {
    if obs.mode_count() != gen.mode_count() {
        return Err(invalid("observer and generator mode counts differ"));
    }
    let forcings: Vec<ModeVector> = (0..steps).map(|j| forcing(j)).collect();
    let path = det_convolution(gen, horizon, steps, |j| forcings[j].clone())?;
    let dt = horizon / steps as f64;

    // At finite truncation every state lies in the extension domain and the
    // extended observation coincides with the direct action; a finiteness
    // check still guards against overflow in ill-scaled inputs.
    let observed: Vec<ModeVector> = path
        .states
        .iter()
        .map(|x| obs.apply(x))
        .collect::<Result<_>>()?;
    if observed.iter().any(|y| !y.is_finite()) {
        return Err(invalid("observed convolution overflowed"));
    }

    let lhs_sq = observed_march_l2_sq(gen, obs, &path.states, &forcings, dt);

    let forcing_sq: Vec<f64> = forcings.iter().map(|f| f.norm_sq() * dt).collect();
    let forcing_l2 = pairwise_sum(&forcing_sq).sqrt();

    let report = admissibility_constant(gen, obs, &[horizon], &[gen.mode_count()])?;
    let gamma = report.gamma_at(0, 0);
    let bound_constant = horizon.sqrt() * gamma;
    let rhs = bound_constant * forcing_l2;
    let lhs = lhs_sq.max(0.0).sqrt();
    let ratio = if rhs > 0.0 { lhs / rhs } else { 0.0 };

    let mut path = path;
    path.observed = Some(observed);
    Ok(ConvolutionCheck {
        path,
        lhs,
        forcing_l2,
        gamma,
        bound_constant,
        rhs,
        ratio,
    })
}

/// Squared L²-in-time norm ∫₀^{JΔt} ‖C u(t)‖² dt of a mild march whose state
/// at the grid is `states` and whose frozen in-step forcing is `forcings`
/// (left endpoints). Within each step the trajectory is reconstructed in
/// closed form: u(t_j + s) = e^{μs} u_j + s φ₁(μs) f_j. Diagonal observers
/// integrate each mode exactly; dense-kernel observers use panelwise
/// Gauss–Legendre on the reconstructed trajectory.
pub(crate) fn observed_march_l2_sq(
    gen: &DiagonalGenerator,
    obs: &ObservationOperator,
    states: &[ModeVector],
    forcings: &[ModeVector],
    dt: f64,
) -> f64 {
    let steps = forcings.len();
    debug_assert!(states.len() >= steps);
    match obs.action() {
        ObservationAction::Diagonal(c) => {
            let mut step_terms = Vec::with_capacity(steps);
            for j in 0..steps {
                let mut mode_terms = Vec::with_capacity(gen.mode_count());
                for n in 0..gen.mode_count() {
                    let y = c[n] * states[j].coeff(n);
                    let f = c[n] * forcings[j].coeff(n);
                    mode_terms.push(mild_step_sq_integral(gen.eigenvalue(n), y, f, dt));
                }
                step_terms.push(pairwise_sum(&mode_terms));
            }
            pairwise_sum(&step_terms)
        }
        ObservationAction::Kernel { .. } => {
            let mut step_terms = Vec::with_capacity(steps);
            for j in 0..steps {
                let integrand = |s: f64| -> f64 {
                    let inner = ModeVector::new(
                        gen.eigenvalues()
                            .iter()
                            .zip(states[j].coeffs().iter().zip(forcings[j].coeffs()))
                            .map(|(mu, (y, f))| {
                                let e = (mu * s).exp();
                                e * y + (phi1(mu * s) * s) * f
                            })
                            .collect(),
                    )
                    .expect("in-step states are finite");
                    obs.apply(&inner).expect("dimensions already checked").norm_sq()
                };
                step_terms.push(crate::numerics::gauss16_composite(0.0, dt, 4, integrand));
            }
            pairwise_sum(&step_terms)
        }
    }
}

// ---------------------------------------------------------------------------
// Stochastic convolution
// ---------------------------------------------------------------------------

/// Stochastic convolution W_A^Φ(t) = ∫₀^t T(t−s) Φ(s) dW(s) along one
/// sampled Wiener path, marched with the exact-variance exponential-Euler
/// kernel (left-endpoint Itô convention).
pub fn stochastic_convolution(
    gen: &DiagonalGenerator,
    table: &DiffusionTable,
    wiener: &WienerPath,
) -> Result<SolutionPath> {
    let steps = wiener.steps();
    let dt = wiener.uniform_dt()?;
    table.check_steps(steps)?;
    for j in 0..steps {
        let m = table.map_at(j);
        if m.rows() != gen.mode_count() {
            return Err(invalid("diffusion output does not match the state space"));
        }
        if m.cols() != wiener.channels() {
            return Err(invalid("diffusion input does not match the noise channels"));
        }
        if matches!(table, DiffusionTable::Constant(_)) {
            break;
        }
    }
    let coeffs = StepCoeffs::new(gen, dt)?;
    let x0 = ModeVector::zeros(gen.mode_count());
    let states = mild_march(
        &coeffs,
        &x0,
        steps,
        |_, _| None,
        |j| {
            Some(
                table
                    .map_at(j)
                    .apply_noise(wiener.increment(j))
                    .expect("dimensions already checked"),
            )
        },
    );
    SolutionPath::new(wiener.grid().to_vec(), states)
}

/// Monte Carlo verdict on the maximal-regularity bound
/// E ∫₀^α ‖C_Λ W_A^Φ(t)‖² dt ≤ γ(α)² ∫₀^α ‖Φ(t)‖₂² dt.
#[derive(Debug, Clone)]
pub struct RegularityCheck {
    /// Per-path values of the left-hand time integral (exact in-step
    /// integration plus the deterministic within-step noise energy, so the
    /// estimator mean equals the continuous-time expectation).
    pub per_path_lhs: Vec<f64>,
    pub lhs_mean: f64,
    pub lhs_stderr: f64,
    /// γ(α)² ∫₀^α ‖Φ‖₂² dt.
    pub rhs: f64,
    /// Admissibility constant γ(α) at the working truncation.
    pub gamma: f64,
    pub alpha: f64,
    /// lhs_mean/rhs, defined as 0 when Φ vanishes.
    pub ratio: f64,
    /// Monte Carlo standard error of the ratio.
    pub ratio_stderr: f64,
    /// Observed trajectories, kept only on request.
    pub paths: Option<Vec<SolutionPath>>,
}

/// Observe the stochastic convolution through a diagonal operator across an
/// ensemble and estimate both sides of the maximal-regularity bound.
///
/// Per path, ∫₀^α ‖C W_A^Φ‖² dt decomposes into the exact integral of the
/// frozen flow from each grid point plus the expected within-step noise
/// energy Σ_n |c_n|² q_n ∫₀^Δt ∫₀^s e^{2 Re μ_n τ} dτ ds, which is
/// deterministic; including it makes the estimator unbiased for the
/// continuous-time left-hand side.
pub fn observed_stoch_convolution(
    gen: &DiagonalGenerator,
    obs: &ObservationOperator,
    table: &DiffusionTable,
    ensemble: &WienerEnsemble,
    store_paths: bool,
) -> Result<RegularityCheck> {
    let multipliers = match obs.action() {
        ObservationAction::Diagonal(c) => c.clone(),
        ObservationAction::Kernel { .. } => {
            return Err(invalid(
                "regularity scans support diagonal observers; kernel observers \
                 are handled by the admissibility scan",
            ))
        }
    };
    if obs.mode_count() != gen.mode_count() {
        return Err(invalid("observer and generator mode counts differ"));
    }
    let steps = ensemble.steps;
    let dt = ensemble.horizon / steps as f64;
    table.check_steps(steps)?;
    let rhs_integral = table.hs_sq_time_integral(&ensemble.cov, dt, steps)?;

    // Deterministic within-step noise energy, identical for every path.
    let mut correction_terms = Vec::with_capacity(steps);
    for j in 0..steps {
        let q = table.map_at(j).row_weights(&ensemble.cov)?;
        let mode_terms: Vec<f64> = (0..gen.mode_count())
            .map(|n| {
                multipliers[n].norm_sqr()
                    * q[n]
                    * growth_integral_antiderivative(gen.eigenvalue(n).re, dt)
            })
            .collect();
        correction_terms.push(pairwise_sum(&mode_terms));
        if matches!(table, DiffusionTable::Constant(_)) {
            let per_step = correction_terms[0];
            correction_terms = vec![per_step; steps];
            break;
        }
    }
    let correction = pairwise_sum(&correction_terms);

    let per_path: Vec<(f64, Option<SolutionPath>)> = (0..ensemble.n_paths)
        .into_par_iter()
        .map(|i| {
            let wiener = ensemble.path(i);
            let mut path = stochastic_convolution(gen, table, &wiener)
                .expect("ensemble grids and tables are validated");
            // Exact ∫ over each step of the flow frozen at its left
            // endpoint: Σ_n |c_n x_n|² ∫₀^Δt e^{2 Re μ_n s} ds.
            let mut step_terms = Vec::with_capacity(steps);
            for j in 0..steps {
                let mode_terms: Vec<f64> = (0..gen.mode_count())
                    .map(|n| {
                        (multipliers[n] * path.states[j].coeff(n)).norm_sqr()
                            * growth_integral(gen.eigenvalue(n).re, dt)
                    })
                    .collect();
                step_terms.push(pairwise_sum(&mode_terms));
            }
            let lhs_i = pairwise_sum(&step_terms) + correction;
            let stored = if store_paths {
                let observed = path
                    .states
                    .iter()
                    .map(|x| obs.apply(x).expect("dimensions already checked"))
                    .collect();
                path.observed = Some(observed);
                Some(path)
            } else {
                None
            };
            (lhs_i, stored)
        })
        .collect();

    let per_path_lhs: Vec<f64> = per_path.iter().map(|(l, _)| *l).collect();
    let (lhs_mean, lhs_stderr) = crate::numerics::mean_and_stderr(&per_path_lhs);

    let report = admissibility_constant(gen, obs, &[ensemble.horizon], &[gen.mode_count()])?;
    let gamma = report.gamma_at(0, 0);
    let rhs = gamma * gamma * rhs_integral;
    let (ratio, ratio_stderr) = if rhs > 0.0 {
        (lhs_mean / rhs, lhs_stderr / rhs)
    } else {
        (0.0, 0.0)
    };
    let paths = if store_paths {
        Some(per_path.into_iter().map(|(_, p)| p.unwrap()).collect())
    } else {
        None
    };
    Ok(RegularityCheck {
        per_path_lhs,
        lhs_mean,
        lhs_stderr,
        rhs,
        gamma,
        alpha: ensemble.horizon,
        ratio,
        ratio_stderr,
        paths,
    })
}

/// Empirical mean of ‖X(horizon)‖² over an ensemble of stochastic
/// convolutions, with its standard error. Convenience for isometry checks.
pub fn terminal_second_moment(
    gen: &DiagonalGenerator,
    table: &DiffusionTable,
    ensemble: &WienerEnsemble,
) -> Result<(f64, f64)> {
    table.check_steps(ensemble.steps)?;
    let values: Vec<f64> = (0..ensemble.n_paths)
        .into_par_iter()
        .map(|i| {
            let wiener = ensemble.path(i);
            stochastic_convolution(gen, table, &wiener)
                .expect("ensemble inputs are validated")
                .last()
                .norm_sq()
        })
        .collect();
    Ok(crate::numerics::mean_and_stderr(&values))
}

// ---------------------------------------------------------------------------
