//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by the fusion segmentation engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward requires a tape-tracked loss")]
    UntrackedLoss,

    #[error("{op}: operands belong to different tapes")]
    TapeMismatch { op: &'static str },

    #[error("mask legend mismatch: {0}")]
    LegendMismatch(String),

    #[error("no prompt point falls inside the mask")]
    Unclassifiable,

    #[error("class index {class} outside legend of {len} classes")]
    ClassOutOfRange { class: usize, len: usize },

    #[error("no prompt text configured for class `{0}`")]
    MissingPrompt(String),

    #[error("invalid {what}: {why}")]
    InvalidConfig { what: &'static str, why: String },

    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed {format}: {why}")]
    Format {
        path: PathBuf,
        format: &'static str,
        why: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, format: &'static str, why: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            format,
            why: why.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
