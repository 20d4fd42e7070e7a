use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A user-supplied configuration or spec value is out of range.
    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("no recognized images under {}", .0.display())]
    EmptyCorpus(PathBuf),

    #[error("duplicate sample id `{0}`")]
    DuplicateSample(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// A loss component became NaN or infinite.
    #[error("training diverged at step {step}: `{component}` is not finite")]
    Divergence { component: String, step: u64 },

    #[error("probe failed: {0}")]
    ProbeFailure(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error in {context}: {reason}")]
    Parse { context: String, reason: String },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, reason: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            reason: reason.to_string(),
        }
    }
}
