//! Error and verdict types shared across the engine.
//!
//! Two kinds of failure are kept apart on purpose:
//!
//! * genuine caller mistakes (bad grids, mismatched dimensions, out-of-range
//!   parameters) surface as [`Error::InvalidArgument`];
//! * mathematically meaningful verdicts — a vector outside the detected
//!   extension domain, an observation operator that is not zero-class, a
//!   fixed-point iteration that ran out of budget — carry structured
//!   diagnostics so callers can inspect *why* instead of re-deriving it.

use crate::spectral::AdmissibilityReport;
use thiserror::Error;

/// Increment history recorded while probing the extension domain on a
/// resolvent-parameter schedule.
#[derive(Debug, Clone)]
pub struct ExtensionDiagnostic {
    /// Schedule of resolvent parameters λ_j that was probed.
    pub lambdas: Vec<f64>,
    /// Norms ‖y_{j+1} − y_j‖ of successive approximant increments.
    pub increments: Vec<f64>,
    /// 1 + ‖y_last‖, the scale the Cauchy test compares against.
    pub reference: f64,
    /// Observed geometric ratio of the last two increments.
    pub ratio: f64,
    /// Geometric-tail estimate of the remaining error, +∞ when the
    /// increments do not contract.
    pub extrapolated_residual: f64,
    /// Tolerance the criterion was evaluated at.
    pub tolerance: f64,
}

/// History of a fixed-point iteration that failed to reach its tolerance.
#[derive(Debug, Clone)]
pub struct ConvergenceDiagnostic {
    /// Which iteration this was (inner contraction, outer coefficient
    /// update, single-level coupled iteration, ...).
    pub label: String,
    /// Increment norms per iteration, in order.
    pub increments: Vec<f64>,
    /// Tolerance that was requested.
    pub tolerance: f64,
    /// Iteration budget that was exhausted.
    pub max_iterations: usize,
}

/// One rejected window candidate from a window-size search.
#[derive(Debug, Clone)]
pub struct WindowCandidate {
    /// Candidate window length.
    pub window: f64,
    /// Value of the inner fixed-point condition 2 c(α)² k² (must be < 1/2).
    pub picard_condition: f64,
    /// Value of the outer contraction constant ζ_α (must be < 1).
    pub outer_contraction: f64,
}

/// Engine-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on caller-supplied data failed.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The probed vector is not in the domain of the extended observation
    /// operator at the resolved precision. This is a verdict, not a bug:
    /// the approximants failed the Cauchy/extrapolation criterion.
    #[error(
        "vector outside extension domain: last increment {last:.3e} vs allowance {allowed:.3e} \
         (ratio {ratio:.3}, extrapolated residual {residual:.3e})",
        last = .0.increments.last().copied().unwrap_or(f64::NAN),
        allowed = .0.tolerance * .0.reference,
        ratio = .0.ratio,
        residual = .0.extrapolated_residual,
    )]
    OutsideExtensionDomain(ExtensionDiagnostic),

    /// No window length satisfied the contraction conditions down to the
    /// refinement floor.
    #[error("no admissible solver window down to {floor:.3e}; {} candidates rejected", .candidates.len())]
    NoAdmissibleWindow {
        floor: f64,
        candidates: Vec<WindowCandidate>,
    },

    /// A fixed-point iteration exhausted its budget before contracting
    /// below tolerance.
    #[error(
        "{} iteration did not reach tol {:.3e} within {} steps (last increment {:.3e})",
        .0.label,
        .0.tolerance,
        .0.max_iterations,
        .0.increments.last().copied().unwrap_or(f64::NAN),
    )]
    ConvergenceFailure(ConvergenceDiagnostic),

    /// The feedback observation operator is not zero-class admissible, so
    /// the multiplicative fixed point has no contraction window. Carries
    /// the admissibility report that produced the verdict.
    #[error(
        "observation operator is not zero-class admissible (γ(α_min)/γ(α_max) = {ratio:?}); \
         the multiplicative fixed point is refused",
        ratio = .0.zero_class_ratio,
    )]
    NotZeroClass(Box<AdmissibilityReport>),

    /// The a-posteriori residual of a converged solution exceeded its
    /// allowance.
    #[error("a-posteriori residual {residual:.3e} exceeds allowance {allowance:.3e}")]
    ResidualTooLarge { residual: f64, allowance: f64 },

    /// An explicit-Euler oracle was asked to take steps that are unstable
    /// for the requested spectrum.
    #[error("explicit step too stiff: max|μ|·Δt = {stiffness:.3} exceeds refusal limit {limit}")]
    StiffStep { stiffness: f64, limit: f64 },
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for [`Error::InvalidArgument`] construction.
pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
