use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("stability bound violated: {bound} margin {margin:.6} >= 1")]
    Stability { bound: &'static str, margin: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: non-finite {term}")]
    Diverged { iteration: u64, term: String },

    #[error("not found: {0}")]
    NotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
