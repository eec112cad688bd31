use thiserror::Error;

/// Errors produced across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("length error: {0}")]
    Length(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("rotation on line {line} is not orthonormal (deviation {deviation:e})")]
    Orthonormality { line: usize, deviation: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no cached activations: {0}")]
    State(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("descriptor database is empty")]
    EmptyDb,

    #[error("mapping fit failed: {0}")]
    Fit(String),

    #[error("underdetermined: {0}")]
    Underdetermined(String),

    #[error("reference positions are collinear (smallest singular value {0:e})")]
    Collinear(f64),

    #[error("solver did not converge: last step norm {0:e}")]
    NonConvergence(f64),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
