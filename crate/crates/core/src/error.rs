use thiserror::Error;

#[derive(Debug, Error)]
pub enum MoeError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("parameter outside the admissible box: {0}")]
    OutOfBox(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("loss shape: {0}")]
    LossShape(String),

    #[error("quadrature: {0}")]
    Quadrature(String),

    #[error("experiment failed: {0}")]
    Experiment(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MoeError>;
