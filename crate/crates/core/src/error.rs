use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ScaiError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ScaiError {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("class index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid exit index {index}; model has {exits} exits")]
    InvalidExit { index: usize, exits: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("budget {budget} is infeasible: cheapest expected cost is {minimum}")]
    InfeasibleBudget { budget: f64, minimum: f64 },

    #[error("degenerate curve: {0}")]
    DegenerateCurve(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("split ratio infeasible: {0}")]
    Split(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed payload: {0}")]
    Payload(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ScaiError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ScaiError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        ScaiError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
