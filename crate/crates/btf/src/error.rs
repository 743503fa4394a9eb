//! Error type shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// The CLI maps these onto distinct exit codes: `Schema` -> 2,
/// `Numeric` -> 3, `Config` -> 4 (and `Io` -> 2, treating unreadable
/// inputs as input errors).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input data: CSV cells, manifest fields, split bounds.
    #[error("schema: {0}")]
    Schema(String),

    /// Invalid experiment or scenario configuration.
    #[error("config: {0}")]
    Config(String),

    /// Numeric failure: cell-space blowup, divergent optimisation, invalid
    /// distribution parameters.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Filesystem error with the offending path attached.
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
