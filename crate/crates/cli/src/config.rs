//! TOML experiment configuration: parsing, validation, and construction of
//! the engine objects. Every load error is a *configuration* error, reported
//! before any artifact is written. Unknown keys are rejected so that typos
//! cannot silently fall back to defaults.

use anyhow::{bail, Context, Result};
use mildspde_core::solvers::{DiffusionMap, DriftMap, SemilinearProblem};
use mildspde_core::spectral::{DiagonalGenerator, ModeVector, ObservationOperator};
use mildspde_core::stochastics::{HilbertSchmidtMap, TraceClassCovariance, WienerEnsemble};
use mildspde_core::delay::DelayMeasure;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_one() -> f64 {
    1.0
}

/// Top-level configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Experiment recorded in the file; the `--experiment` flag overrides it.
    #[serde(default)]
    pub experiment: Option<String>,
    pub problem: ProblemConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub delay: Option<DelayConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Eigenvalue law: `heat` (μ_n = −n²), `schrodinger` (μ_n = −i·n²), or
    /// `explicit` with `eigenvalues_re`/`eigenvalues_im`.
    pub generator: String,
    /// Truncation level N.
    pub modes: usize,
    #[serde(default)]
    pub eigenvalues_re: Vec<f64>,
    #[serde(default)]
    pub eigenvalues_im: Vec<f64>,

    /// Observation law: `identity`, `zero`, `fractional` (uses `theta`),
    /// `derivative` (c_n = n), `explicit` with `multipliers_re`/`_im`, or
    /// `kernel-file` with `kernel_file` pointing at a dense matrix.
    pub observer: String,
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub multipliers_re: Vec<f64>,
    #[serde(default)]
    pub multipliers_im: Vec<f64>,
    #[serde(default)]
    pub kernel_file: Option<String>,

    /// Covariance law: `isotropic` (λ_k = strength), `polynomial`
    /// (λ_k = k^{−strength}), or `explicit` with `covariance_eigenvalues`.
    pub covariance: String,
    /// Number of noise channels K.
    pub channels: usize,
    #[serde(default = "default_one")]
    pub covariance_strength: f64,
    #[serde(default)]
    pub covariance_eigenvalues: Vec<f64>,

    /// Drift nonlinearity: `zero`, `linear` (F(y) = k·y), `saturating`
    /// (F(y) = k·tanh componentwise), or `constant` with `constant_re`/`_im`.
    pub nonlinearity: String,
    /// Lipschitz/scale constant k of the nonlinearity.
    #[serde(default)]
    pub lipschitz: f64,
    #[serde(default)]
    pub constant_re: Vec<f64>,
    #[serde(default)]
    pub constant_im: Vec<f64>,

    /// Diffusion coefficient: `zero`, `additive-identity`, `additive-scaled`,
    /// `additive-diagonal` with `diffusion_diagonal_re`/`_im`, or
    /// `state-scaling` (𝓜(x) = scale·diag(x)).
    pub diffusion: String,
    #[serde(default = "default_one")]
    pub diffusion_scale_re: f64,
    #[serde(default)]
    pub diffusion_scale_im: f64,
    #[serde(default)]
    pub diffusion_diagonal_re: Vec<f64>,
    #[serde(default)]
    pub diffusion_diagonal_im: Vec<f64>,

    /// Initial data ξ; empty defaults to the decaying profile ξ_n = 1/n.
    #[serde(default)]
    pub initial_re: Vec<f64>,
    #[serde(default)]
    pub initial_im: Vec<f64>,
    /// Second initial point η for dependence experiments; empty → ξ/2.
    #[serde(default)]
    pub initial_b_re: Vec<f64>,
    #[serde(default)]
    pub initial_b_im: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Horizon T.
    pub horizon: f64,
    /// Step size Δt; T/Δt must be an integer (to 1e−9 relative).
    pub dt: f64,
    /// Ensemble size.
    pub paths: usize,
    /// Base RNG seed; the `--seed` flag overrides it.
    pub seed: u64,
    /// Fixed-point tolerance.
    pub tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayConfig {
    /// Delay horizon r.
    pub lag: f64,
    /// Segment grid slots; Δθ = lag/slots must equal the run Δt.
    pub slots: usize,
    /// Exclusion band: atoms live in [−r, −theta_min].
    pub theta_min: f64,
    #[serde(default)]
    pub drift_atoms: Vec<AtomSpec>,
    #[serde(default)]
    pub neutral_atoms: Vec<AtomSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    /// Lag θ ∈ [−r, −theta_min].
    pub lag: f64,
    /// Scalar weight, real part.
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

/// Everything the experiments need, built once from a validated config.
pub struct BuiltProblem {
    pub generator: DiagonalGenerator,
    pub observer: ObservationOperator,
    pub covariance: TraceClassCovariance,
    pub drift: DriftMap,
    pub diffusion: DiffusionMap,
    pub problem: SemilinearProblem,
    pub initial: ModeVector,
    pub initial_b: ModeVector,
    pub steps: usize,
}

fn complex_vector(re: &[f64], im: &[f64], what: &str, len: usize) -> Result<Vec<Complex64>> {
    if re.len() != len {
        bail!("{what}: expected {len} real entries, got {}", re.len());
    }
    if !im.is_empty() && im.len() != len {
        bail!(
            "{what}: imaginary part has {} entries, expected 0 or {len}",
            im.len()
        );
    }
    Ok(re
        .iter()
        .enumerate()
        .map(|(i, &r)| Complex64::new(r, im.get(i).copied().unwrap_or(0.0)))
        .collect())
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: Config =
            toml::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if p.modes == 0 {
            bail!("problem.modes must be ≥ 1");
        }
        if p.channels == 0 {
            bail!("problem.channels must be ≥ 1");
        }
        let r = &self.run;
        if !(r.horizon > 0.0 && r.horizon.is_finite()) {
            bail!("run.horizon must be finite and > 0");
        }
        if !(r.dt > 0.0 && r.dt.is_finite()) {
            bail!("run.dt must be finite and > 0");
        }
        let steps = (r.horizon / r.dt).round();
        if steps < 1.0 || (steps * r.dt - r.horizon).abs() > 1e-9 * r.horizon {
            bail!(
                "run.horizon / run.dt = {} is not an integer step count",
                r.horizon / r.dt
            );
        }
        if r.paths == 0 {
            bail!("run.paths must be ≥ 1");
        }
        if !(r.tol >= 0.0 && r.tol.is_finite()) {
            bail!("run.tol must be finite and ≥ 0");
        }
        if let Some(d) = &self.delay {
            if d.slots == 0 {
                bail!("delay.slots must be ≥ 1");
            }
            if !(d.lag > 0.0 && d.lag.is_finite()) {
                bail!("delay.lag must be finite and > 0");
            }
        }
        // Build everything once: constructor errors are configuration errors.
        self.build()?;
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.run.horizon / self.run.dt).round() as usize
    }

    pub fn build(&self) -> Result<BuiltProblem> {
        let p = &self.problem;
        let generator = match p.generator.as_str() {
            "heat" => DiagonalGenerator::heat(p.modes),
            "schrodinger" => DiagonalGenerator::schrodinger(p.modes),
            "explicit" => {
                let eig = complex_vector(
                    &p.eigenvalues_re,
                    &p.eigenvalues_im,
                    "problem.eigenvalues",
                    p.modes,
                )?;
                DiagonalGenerator::new(eig).map_err(|e| anyhow::anyhow!("{e}"))?
            }
            other => bail!("unknown generator law '{other}' (heat | schrodinger | explicit)"),
        };
        let observer = match p.observer.as_str() {
            "identity" => ObservationOperator::identity(p.modes),
            "zero" => ObservationOperator::zero(p.modes),
            "derivative" => ObservationOperator::derivative(p.modes),
            "fractional" => ObservationOperator::fractional(&generator, p.theta)
                .map_err(|e| anyhow::anyhow!("{e}"))?,
            "explicit" => {
                let mult = complex_vector(
                    &p.multipliers_re,
                    &p.multipliers_im,
                    "problem.multipliers",
                    p.modes,
                )?;
                ObservationOperator::diagonal(mult, "explicit").map_err(|e| anyhow::anyhow!("{e}"))?
            }
            "kernel-file" => {
                let file = p
                    .kernel_file
                    .as_deref()
                    .context("observer 'kernel-file' needs problem.kernel_file")?;
                let text = std::fs::read_to_string(file)
                    .with_context(|| format!("cannot read kernel file {file}"))?;
                let mut entries = Vec::new();
                for (ln, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let mut parts = line.split(',');
                    let re: f64 = parts
                        .next()
                        .context("kernel line missing real part")?
                        .trim()
                        .parse()
                        .with_context(|| format!("kernel file line {}", ln + 1))?;
                    let im: f64 = match parts.next() {
                        Some(s) => s
                            .trim()
                            .parse()
                            .with_context(|| format!("kernel file line {}", ln + 1))?,
                        None => 0.0,
                    };
                    if parts.next().is_some() {
                        bail!("kernel file line {}: expected 're' or 're,im'", ln + 1);
                    }
                    entries.push(Complex64::new(re, im));
                }
                if entries.len() != p.modes * p.modes {
                    bail!(
                        "kernel file holds {} entries, need modes² = {}",
                        entries.len(),
                        p.modes * p.modes
                    );
                }
                ObservationOperator::kernel(p.modes, entries, "kernel-file")
                    .map_err(|e| anyhow::anyhow!("{e}"))?
            }
            other => bail!(
                "unknown observer law '{other}' \
                 (identity | zero | derivative | fractional | explicit | kernel-file)"
            ),
        };
        let covariance = match p.covariance.as_str() {
            "isotropic" => TraceClassCovariance::isotropic(p.channels, p.covariance_strength)
                .map_err(|e| anyhow::anyhow!("{e}"))?,
            "polynomial" => TraceClassCovariance::polynomial(p.channels, p.covariance_strength)
                .map_err(|e| anyhow::anyhow!("{e}"))?,
            "explicit" => {
                if p.covariance_eigenvalues.len() != p.channels {
                    bail!(
                        "problem.covariance_eigenvalues has {} entries, expected {}",
                        p.covariance_eigenvalues.len(),
                        p.channels
                    );
                }
                TraceClassCovariance::new(p.covariance_eigenvalues.clone())
                    .map_err(|e| anyhow::anyhow!("{e}"))?
            }
            other => bail!("unknown covariance law '{other}' (isotropic | polynomial | explicit)"),
        };
        let drift = match p.nonlinearity.as_str() {
            "zero" => DriftMap::zero(p.modes),
            "linear" => DriftMap::linear(p.lipschitz),
            "saturating" => DriftMap::saturating(p.lipschitz),
            "constant" => {
                let v = complex_vector(&p.constant_re, &p.constant_im, "problem.constant", p.modes)?;
                DriftMap::constant(ModeVector::new(v).map_err(|e| anyhow::anyhow!("{e}"))?)
            }
            other => bail!(
                "unknown nonlinearity '{other}' (zero | linear | saturating | constant)"
            ),
        };
        let scale = Complex64::new(p.diffusion_scale_re, p.diffusion_scale_im);
        let diffusion = match p.diffusion.as_str() {
            "zero" => DiffusionMap::zero(p.modes),
            "additive-identity" => {
                if p.channels != p.modes {
                    bail!("additive-identity diffusion needs channels == modes");
                }
                DiffusionMap::additive(HilbertSchmidtMap::identity(p.modes))
            }
            "additive-scaled" => {
                if p.channels != p.modes {
                    bail!("additive-scaled diffusion needs channels == modes");
                }
                DiffusionMap::additive(HilbertSchmidtMap::scaled_identity(p.modes, scale))
            }
            "additive-diagonal" => {
                if p.channels != p.modes {
                    bail!("additive-diagonal diffusion needs channels == modes");
                }
                let d = complex_vector(
                    &p.diffusion_diagonal_re,
                    &p.diffusion_diagonal_im,
                    "problem.diffusion_diagonal",
                    p.modes,
                )?;
                DiffusionMap::additive(
                    HilbertSchmidtMap::diagonal(d).map_err(|e| anyhow::anyhow!("{e}"))?,
                )
            }
            "state-scaling" => {
                if p.channels != p.modes {
                    bail!("state-scaling diffusion needs channels == modes");
                }
                DiffusionMap::state_scaling(scale, &covariance)
            }
            other => bail!(
                "unknown diffusion '{other}' (zero | additive-identity | additive-scaled | \
                 additive-diagonal | state-scaling)"
            ),
        };
        let initial = if p.initial_re.is_empty() && p.initial_im.is_empty() {
            ModeVector::from_real(
                &(1..=p.modes).map(|n| 1.0 / n as f64).collect::<Vec<_>>(),
            )
        } else {
            ModeVector::new(complex_vector(
                &p.initial_re,
                &p.initial_im,
                "problem.initial",
                p.modes,
            )?)
            .map_err(|e| anyhow::anyhow!("{e}"))?
        };
        let initial_b = if p.initial_b_re.is_empty() && p.initial_b_im.is_empty() {
            initial.scale_re(0.5)
        } else {
            ModeVector::new(complex_vector(
                &p.initial_b_re,
                &p.initial_b_im,
                "problem.initial_b",
                p.modes,
            )?)
            .map_err(|e| anyhow::anyhow!("{e}"))?
        };
        let problem = SemilinearProblem::new(
            generator.clone(),
            observer.clone(),
            drift.clone(),
            diffusion.clone(),
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(BuiltProblem {
            generator,
            observer,
            covariance,
            drift,
            diffusion,
            problem,
            initial,
            initial_b,
            steps: self.steps(),
        })
    }

    /// Build the Wiener ensemble for this run.
    pub fn ensemble(&self, built: &BuiltProblem) -> Result<WienerEnsemble> {
        WienerEnsemble::new(
            built.covariance.clone(),
            self.run.horizon,
            self.steps(),
            self.run.paths,
            self.run.seed,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))
    }

    /// Build a delay measure from an atom list; an empty list is the empty
    /// measure.
    pub fn measure(&self, atoms: &[AtomSpec]) -> Result<DelayMeasure> {
        let d = self
            .delay
            .as_ref()
            .context("this experiment needs a [delay] section")?;
        let pairs = atoms
            .iter()
            .map(|a| {
                (
                    a.lag,
                    mildspde_core::delay::AtomWeight::Scalar(Complex64::new(a.re, a.im)),
                )
            })
            .collect::<Vec<_>>();
        if pairs.is_empty() {
            DelayMeasure::empty(d.lag, d.theta_min).map_err(|e| anyhow::anyhow!("{e}"))
        } else {
            DelayMeasure::new(d.lag, d.theta_min, pairs).map_err(|e| anyhow::anyhow!("{e}"))
        }
    }
}
