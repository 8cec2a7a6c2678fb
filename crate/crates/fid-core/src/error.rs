//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FidError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{context}: matrix is not symmetric positive definite")]
    NotSpd { context: &'static str },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("filter diverged for hypothesis `{0}`")]
    Diverged(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown scenario id `{0}`")]
    UnknownScenario(String),

    #[error("{context}: `{name}` = {value} is outside {bounds}")]
    OutOfRange {
        context: &'static str,
        name: &'static str,
        value: f64,
        bounds: &'static str,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("trial simulation produced a non-finite state after {attempts} attempts")]
    InvalidTrial { attempts: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FidError>;
