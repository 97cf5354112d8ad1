use thiserror::Error;

/// Errors raised by the sensitivity toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("evaluator `{0}` returned a non-finite value")]
    EvaluatorFailure(String),
    #[error("problem construction failed: {0}")]
    InvalidProblem(String),
    #[error("null-space basis could not be computed: {0}")]
    RankDeficientBasis(String),
    #[error("KKT matrix is singular (smallest pivot {min_pivot:.3e}); use the surrogate system")]
    SingularKktMatrix { min_pivot: f64 },
    #[error("alpha must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("regularization weight must be positive, got {0}")]
    NonPositiveRho(f64),
    #[error("point is infeasible: g[{index}] = {value:.3e} exceeds tolerance")]
    InfeasiblePoint { index: usize, value: f64 },
    #[error("system is ill-conditioned (condition estimate {0:.3e})")]
    IllConditioned(f64),
    #[error("bound inapplicable: rho_bar * kappa * L3 = {0:.3e} >= 1")]
    BoundInapplicable(f64),
    #[error("sensitivity result carries no dual sensitivities")]
    MissingDualSensitivities,
    #[error("re-solve for parameter coordinate {coordinate} jumped to another branch (distance {distance:.3e} > radius {radius:.3e})")]
    BranchJump {
        coordinate: usize,
        distance: f64,
        radius: f64,
    },
    #[error("reference Jacobian has zero norm")]
    ZeroReference,
    #[error("solver failed{}: {status}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    SolverFailure { status: String, step: Option<usize> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
