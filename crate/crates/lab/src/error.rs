//! Harness-level error type: configuration and filesystem failures on top of
//! the numeric errors propagated from the core crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    /// An out-of-range or inconsistent configuration field, named in the
    /// message; raised before any trial runs.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// The config file (or an input matrix) could not be parsed.
    #[error("parse failure in {path}: {detail}")]
    ParseFailure { path: String, detail: String },

    /// Filesystem error while reading inputs or writing reports.
    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Numeric failure propagated from the core library.
    #[error(transparent)]
    Core(#[from] icl_kd_core::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
