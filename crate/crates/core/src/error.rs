use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or batch dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is out of its valid range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was called in a state it cannot handle
    /// (e.g. backward against a cache from a different batch).
    #[error("invalid state: {0}")]
    State(String),

    /// A metric is mathematically undefined for the given input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A file had the wrong magic, version, or structure.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// One or more referenced files are missing or unreadable.
    #[error("missing files: {}", .0.join(", "))]
    MissingFiles(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
