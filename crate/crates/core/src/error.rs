use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no decodable patches found in {0}")]
    NoPatches(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Codec(String),

    #[error("degenerate affine matrix (det = {0:e})")]
    Degenerate(f64),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("critic unavailable: {0}")]
    CriticUnavailable(String),

    #[error("critic protocol error: {0}")]
    ProtocolError(String),

    #[error("loss aggregation error: {0}")]
    AggregationError(String),

    #[error("invalid region layout: {0}")]
    InvalidLayout(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("operation not allowed in phase {0}")]
    InvalidPhase(String),

    #[error("edits are rejected while the optimizer is running")]
    EditWhileRunning,

    #[error("pixel ({x}, {y}) outside {width}x{height} canvas")]
    OutOfBounds {
        x: i64,
        y: i64,
        width: usize,
        height: usize,
    },

    #[error("checkpoint checksum error: {0}")]
    ChecksumError(String),

    #[error("checkpoint was written for a different patch library")]
    LibraryMismatch,
}
