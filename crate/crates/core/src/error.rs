use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unknown segmentation label {label} (not in part scheme '{scheme}')")]
    UnknownLabel { label: u8, scheme: String },

    #[error("unknown tag '{0}'")]
    UnknownTag(String),

    #[error("unknown image id '{0}'")]
    UnknownImage(String),

    #[error("unknown part '{0}'")]
    UnknownPart(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {actual})")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    /// Malformed or inconsistent on-disk data.
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite loss in batch {batch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("tag '{tag}' has {positives} positives and {negatives} negatives; need at least {need_pos} positives and {need_neg} negatives")]
    InsufficientPool {
        tag: String,
        positives: usize,
        negatives: usize,
        need_pos: usize,
        need_neg: usize,
    },

    #[error("model/dataset mismatch: {0}")]
    Incompatible(String),
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

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
