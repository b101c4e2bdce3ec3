use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("schema violation in {context}: field `{field}`: {reason}")]
    Schema {
        context: String,
        field: String,
        reason: String,
    },

    #[error("metadata error: {0}")]
    Metadata(String),

    #[error("homography estimation failed: {0}")]
    Estimation(String),

    #[error("alignment impossible: {0}")]
    AlignmentImpossible(String),

    #[error("scene rejected: {0}")]
    Rejected(String),

    #[error("training diverged at step {step} (epoch {epoch}): {detail}")]
    Diverged {
        step: usize,
        epoch: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn schema(
        context: impl Into<String>,
        field: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        Error::Schema {
            context: context.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }
}
