use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("Hurst parameter {0} outside (1/3, 1]")]
    HurstOutOfRange(f64),

    #[error("covariance matrix is not positive definite after regularization (steps = {steps})")]
    NotPositiveDefinite { steps: usize },

    #[error("grid specifications of the two paths differ")]
    SpecMismatch,

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("two-index function is not monotone: value decreased between ({from}, {to_prev}) and ({from}, {to})")]
    NotMonotone { from: usize, to_prev: usize, to: usize },

    #[error("non-finite state at step {step}")]
    BlowUp { step: usize },

    #[error("empty measure")]
    EmptyMeasure,

    #[error("rate fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),

    #[error("non-positive error value {value} at n = {n}")]
    NonPositiveError { n: usize, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed setup dump: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
