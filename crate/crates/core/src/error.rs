use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network shape: {0}")]
    InvalidShape(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// The search grid for the brute-force minimizer does not overlap the samples.
    #[error("suspect search range [{lo}, {hi}]: samples lie in [{min}, {max}]")]
    SuspectRange { lo: f64, hi: f64, min: f64, max: f64 },

    #[error("non-finite gradient entry at flat index {0}")]
    NonFiniteGradient(usize),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("series too short: need at least {needed} points, have {have}")]
    SeriesTooShort { needed: usize, have: usize },

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },

    #[error("malformed row at line {line}: non-numeric cell {value:?} in column `{column}`")]
    NonNumericCell {
        line: u64,
        column: String,
        value: String,
    },

    #[error("timestamps not strictly increasing at line {line}")]
    NonIncreasingTimestamps { line: u64 },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("misaligned interval lists: {0}")]
    Misaligned(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
