use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("Hankel depth {depth} exceeds signal length {len}")]
    DepthExceedsData { depth: usize, len: usize },

    #[error("Hankel depth {depth} does not equal T_ini + N = {expected}")]
    DepthMismatch { depth: usize, expected: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("mass {index} must be positive (got {value})")]
    NonPositiveMass { index: usize, value: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("bad hybrid split: {0}")]
    BadSplit(String),

    #[error("input data is not persistently exciting of order {order}")]
    ExcitationFailed { order: usize },

    #[error("quadratic cost matrix is not symmetric positive semidefinite: {0}")]
    NotPsd(String),

    #[error("input/output buffers hold {have} samples, {need} required")]
    BuffersNotWarm { have: usize, need: usize },

    #[error("expected {expected} scenarios, got {got}")]
    ScenarioCountMismatch { expected: usize, got: usize },

    #[error("improvement base must be positive (got {0})")]
    NonPositiveBase(f64),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
