use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DafosError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DafosError {
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("insufficient classes: {0}")]
    InsufficientClasses(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {message}")]
    Numeric { message: String, dump: String },

    #[error("missing checkpoint segment `{0}`")]
    MissingSegment(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

/// Coarse error categories; the CLI maps them to process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Io,
}

impl DafosError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        DafosError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DafosError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            DafosError::Config { .. } | DafosError::InvalidArgument(_) => ErrorCategory::Config,
            DafosError::Data(_)
            | DafosError::InsufficientClasses(_)
            | DafosError::InsufficientSamples(_)
            | DafosError::MissingSegment(_) => ErrorCategory::Data,
            DafosError::Shape(_) | DafosError::Numeric { .. } => ErrorCategory::Numeric,
            DafosError::Io { .. } | DafosError::Serde(_) => ErrorCategory::Io,
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Io => 5,
        }
    }
}

impl From<serde_json::Error> for DafosError {
    fn from(e: serde_json::Error) -> Self {
        DafosError::Serde(e.to_string())
    }
}

impl From<csv::Error> for DafosError {
    fn from(e: csv::Error) -> Self {
        DafosError::Serde(e.to_string())
    }
}
