//! Spectral engine for mild solutions of semilinear stochastic evolution
//! equations driven by trace-class Wiener noise, with support for unbounded
//! observation operators acting through their resolvent extensions.

#![forbid(unsafe_code)]

pub mod analysis;
pub mod delay;
pub mod error;
pub mod numerics;
pub mod path;
pub mod solvers;
pub mod spectral;
pub mod stochastics;

pub use analysis::{
    coupled_picard_path, estimate_dependence, euler_maruyama_path, feller_modulus,
    gronwall_chain, transition_semigroup, DependenceReport, EulerMaruyamaRun, FellerRow,
    FellerTable, GronwallChain, TestFunction, TransitionEstimate,
};
pub use delay::{
    delay_apply, history_lift, product_semigroup_apply, shift_semigroup_apply, solve_neutral,
    AtomWeight, DelayMeasure, NeutralSolution, ProductState, SegmentDiffusion, SegmentState,
};
pub use error::{
    ConvergenceDiagnostic, Error, ExtensionDiagnostic, Result, WindowCandidate,
};
pub use path::SolutionPath;
pub use solvers::{
    picard_inner, plan_windows, solve_multiplicative_unbounded, solve_semilinear,
    solve_semilinear_single, DiffusionMap, DriftMap, InitialGuess, MultiplicativeSolution,
    SemilinearProblem, SemilinearSolution, SolveOptions, WindowPlan, WindowReport,
};
pub use spectral::{
    admissibility_constant, admissibility_constant_with, default_lambda_schedule,
    resolvent_apply, semigroup_apply, yosida_approximant, yosida_extension,
    AdmissibilityReport, AdmissibilitySettings, DiagonalGenerator, ModeVector,
    ObservationAction, ObservationOperator,
};
pub use stochastics::{
    det_convolution, observed_det_convolution, observed_stoch_convolution, sample_wiener,
    stochastic_convolution, terminal_second_moment, ConvolutionCheck, DiffusionTable,
    HilbertSchmidtMap, RegularityCheck, StepCoeffs, TraceClassCovariance, WienerEnsemble,
    WienerPath,
};
