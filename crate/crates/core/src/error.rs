use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A distribution or configuration parameter is outside its domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A non-finite value appeared in the forward pass. `layer` is 1-based.
    #[error("non-finite activation in layer {layer}")]
    Numeric { layer: usize },

    /// Malformed input file. `field` names the header field or section at fault.
    #[error("{path}: bad {field}: {detail}")]
    Format {
        path: PathBuf,
        field: String,
        detail: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    /// An operation was called out of order or with too little input.
    #[error("usage error: {0}")]
    Usage(String),

    /// Every problem found while validating an experiment configuration.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            field: field.into(),
            detail: detail.into(),
        }
    }
}
