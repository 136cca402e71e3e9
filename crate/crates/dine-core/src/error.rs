use thiserror::Error;

/// Errors surfaced by the tensor engine, the networks, and the trainers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what}: expected dimension {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid parameter {name} = {value}: must satisfy {constraint}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },

    #[error("no sign change on ({lo}, {hi}); root bracketing failed")]
    NoSignChange { lo: f64, hi: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
