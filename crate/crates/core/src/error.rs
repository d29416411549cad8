use std::path::PathBuf;

use thiserror::Error;

/// Every failure surfaced by the library. The `Display` form always starts
/// with the category so callers can print it verbatim.
#[derive(Debug, Error)]
pub enum HcrfError {
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate-weight error: {0}")]
    DegenerateWeight(String),

    #[error("balance error: {0}")]
    Balance(String),

    /// Input carries no usable contrast (constant image, flat histogram, single cluster).
    #[error("degenerate-input error: {0}")]
    Degenerate(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<HcrfError>,
    },
}

impl HcrfError {
    pub fn parameter(msg: impl Into<String>) -> Self {
        HcrfError::Parameter(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        HcrfError::Format(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HcrfError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category tag, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            HcrfError::Parameter(_) => "parameter",
            HcrfError::Format(_) => "format",
            HcrfError::Numeric(_) => "numeric",
            HcrfError::DegenerateWeight(_) => "degenerate-weight",
            HcrfError::Balance(_) => "balance",
            HcrfError::Degenerate(_) => "degenerate-input",
            HcrfError::Io { .. } => "io",
            HcrfError::Context { source, .. } => source.category(),
        }
    }

    /// Wraps the error with a description of what was being processed,
    /// keeping the original category.
    pub fn context(self, context: impl Into<String>) -> Self {
        HcrfError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, HcrfError>;
