use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An input fell outside the domain of the operation (non-positive depth, bad range, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Two inputs disagree on a shape or size that the caller was required to keep consistent.
    #[error("contract violation: {0}")]
    Contract(String),

    /// There was nothing to compute over (no mutually valid pixels, empty point set, ...).
    #[error("empty input: {0}")]
    Empty(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step} in component {component}")]
    NonFinite { step: usize, component: &'static str },

    /// A file could not be parsed.
    #[error("{path}: {message}{}", .offset.map(|o| format!(" (byte offset {o})")).unwrap_or_default())]
    Format {
        path: PathBuf,
        offset: Option<usize>,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, offset: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data (as opposed to misuse of the API).
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Format { .. } | Error::Io { .. } | Error::Empty(_) | Error::NonFinite { .. })
    }
}
