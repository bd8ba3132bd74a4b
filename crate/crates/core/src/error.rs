use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants fall into two families that the CLI maps to distinct exit
/// codes: configuration problems (bad parameters, unsupported regions) and
/// data problems (malformed files, missing areas, divergence).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range 0..{len}")]
    Range { index: usize, len: usize },

    #[error("coordinate ({lat}, {lon}) lies outside the supported mesh region")]
    UnsupportedRegion { lat: f64, lon: f64 },

    #[error("malformed geocode {0:?}")]
    Geocode(String),

    #[error("input is empty: {0}")]
    Empty(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("training diverged at epoch {epoch} (learning rate {learning_rate}): loss is not finite")]
    Divergence { epoch: usize, learning_rate: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by invalid parameters rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Range { .. } | Error::UnsupportedRegion { .. }
        )
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
