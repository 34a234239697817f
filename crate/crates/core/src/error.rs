use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value in {name}")]
    NonFinite { name: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("class {class} has {count} correctly classified instances, at least {required} needed")]
    TooFewCorrect {
        class: usize,
        count: usize,
        required: usize,
    },

    #[error("degenerate distance tail{}: all tail values are equal", class_suffix(.class))]
    DegenerateTail { class: Option<usize> },

    #[error("Weibull shape estimation did not converge: {0}")]
    NoConvergence(String),

    #[error(
        "replay budget exhausted: accepted {accepted} of {requested} after {attempts} draws \
         (acceptance rate {acceptance_rate:.6})"
    )]
    ReplayBudgetExhausted {
        accepted: usize,
        requested: usize,
        attempts: usize,
        acceptance_rate: f64,
    },

    #[error("malformed IDX data at byte offset {offset}: {reason}")]
    Idx { offset: usize, reason: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn class_suffix(class: &Option<usize>) -> String {
    class.map(|c| format!(" for class {c}")).unwrap_or_default()
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
