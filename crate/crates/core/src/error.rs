//! Crate-wide error type. Variants carry enough payload to locate the
//! offending evaluation (time, state, parameter, step index).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("diffusion coefficient sigma({t}, {x}) = {value:e} is below the floor {floor:e}")]
    SigmaFloor { t: f64, x: f64, value: f64, floor: f64 },

    #[error("non-finite {what} at t = {t}, x = {x}, theta = {theta:?}")]
    NonFiniteEvaluation { what: &'static str, t: f64, x: f64, theta: Vec<f64> },

    #[error("non-finite state at step {index} (t = {t}): simulation aborted")]
    NonFiniteState { index: usize, t: f64 },

    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },

    #[error("theta = {theta:?} is not strictly inside the box {lower:?}..{upper:?}")]
    OutsideParameterSpace { theta: Vec<f64>, lower: Vec<f64>, upper: Vec<f64> },

    #[error("parameter box is degenerate: lower = {lower:?}, upper = {upper:?}")]
    DegenerateParameterSpace { lower: Vec<f64>, upper: Vec<f64> },

    #[error("grid needs at least 2 intervals, got {got}")]
    GridTooCoarse { got: usize },

    #[error("horizon must be positive and finite, got {value}")]
    BadHorizon { value: f64 },

    #[error("epsilon must lie in (0, 1), got {value}")]
    BadEpsilon { value: f64 },

    #[error("exponent of psi overflowed: integral value {integral} at t = {t}")]
    PsiOverflow { integral: f64, t: f64 },

    #[error(
        "information matrix is singular or indefinite (min eigenvalue {min_eig:e}, \
         condition number {condition:e})"
    )]
    SingularInformation { min_eig: f64, condition: f64 },

    #[error("matrix is not symmetric: max asymmetry {asymmetry:e} exceeds {tol:e}")]
    NotSymmetric { asymmetry: f64, tol: f64 },

    #[error("the first test requires a scalar parameter, got d = {dim}")]
    ScalarParameterRequired { dim: usize },

    #[error(
        "estimation failed: {reason} (best theta {theta:?}, scaled gradient norm {grad_norm:e})"
    )]
    EstimationFailed { reason: &'static str, theta: Vec<f64>, grad_norm: f64 },

    #[error(
        "tail weight matrix degenerate at t = {t} (min eigenvalue {min_eig:e} < {floor:e}) \
         before the cutoff T - nu = {cutoff}"
    )]
    DegenerateTailMatrix { t: f64, min_eig: f64, floor: f64, cutoff: f64 },

    #[error(
        "drift minimizer is not unique: {first:?} and {second:?} both attain {value:e}"
    )]
    NonUniqueMinimizer { first: Vec<f64>, second: Vec<f64>, value: f64 },

    #[error("truncation policy invalid: nu = {nu} must lie in (0, T) and min_eig = {min_eig} > 0")]
    BadTruncationPolicy { nu: f64, min_eig: f64 },

    #[error("alpha = {alpha} is outside the open interval (0, 1)")]
    AlphaRange { alpha: f64 },

    #[error("alpha = {alpha} is outside the table coverage [{min_alpha}, {max_alpha}]")]
    AlphaCoverage { alpha: f64, min_alpha: f64, max_alpha: f64 },

    #[error("quantile table malformed: {reason}")]
    MalformedTable { reason: String },

    #[error("experiment aborted: {failures} of {total} replications failed (budget {budget})")]
    ExperimentAborted { failures: usize, total: usize, budget: usize },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for the "aborted run" failure mode that the CLI maps to exit code 2.
    pub fn is_aborted_run(&self) -> bool {
        matches!(self, Error::ExperimentAborted { .. })
    }
}
