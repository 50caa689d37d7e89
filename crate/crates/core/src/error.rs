//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by dataset handling, geometry, training, and the denoiser
/// wire protocol.
#[derive(Debug, Error)]
pub enum Error {
    /// A camera pose failed validation (non-orthonormal rotation, reflection,
    /// or a viewing axis that cannot be re-aimed at the object center).
    #[error("degenerate pose: {0}")]
    DegeneratePose(String),

    /// An operation received inputs whose dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A configuration value is out of its documented range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Dataset directory or manifest is malformed; the message names the
    /// offending frame or file.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A loss term evaluated to a non-finite value; the message names the term.
    #[error("non-finite loss term '{term}' (value {value})")]
    NonFinite { term: &'static str, value: f64 },

    /// Checkpoint file is corrupt, from an incompatible version, or was
    /// written under a different configuration.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Remote denoiser protocol failure (transport, status, or payload).
    #[error("denoiser protocol error: {0}")]
    Protocol(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// PNG encode/decode failure.
    #[error("image error: {0}")]
    Image(String),

    /// JSON (manifest, metrics, wire) failure.
    #[error("json error: {0}")]
    Json(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;
