use thiserror::Error;

/// Errors raised by the optimizer components.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum EgorseError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate point (distance {distance:e} to point #{index})")]
    DuplicatePoint { index: usize, distance: f64 },
    #[error("non-finite output value {0}")]
    NonFiniteOutput(f64),
    #[error("covariance matrix not positive definite even with nugget {nugget:e}")]
    NotPositiveDefinite { nugget: f64 },
    #[error("reduced dimension {d_e} must satisfy 1 <= d_e < d = {d}")]
    BadReducedDimension { d: usize, d_e: usize },
    #[error("constant outputs: no supervised direction can be extracted")]
    ConstantOutputs,
    #[error("rank-deficient transfer matrix: {0}")]
    RankDeficient(String),
    #[error("point is not in the embedding subspace (residual {residual:e} > tol {tol:e})")]
    NotMember { residual: f64, tol: f64 },
    #[error("{solver} did not converge after {iterations} iterations (residuals {residuals:?})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residuals: Vec<f64>,
    },
    #[error("point outside the design box: {0}")]
    OutOfBox(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for EgorseError {
    fn from(e: std::io::Error) -> Self {
        EgorseError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, EgorseError>;
