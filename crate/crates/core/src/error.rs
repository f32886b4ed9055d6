use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("division by zero in {0}")]
    DivisionByZero(&'static str),

    #[error("degenerate mixture component {component}: zero resultant vector")]
    DegenerateComponent { component: usize },

    #[error("column sums are not recoverable: translation vector vanishes")]
    NotRecoverable,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("training diverged at step {step} (last finite loss {last_finite_loss} at step {last_finite_step})")]
    Diverged {
        step: usize,
        last_finite_step: usize,
        last_finite_loss: f64,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed {kind} file {path}: {detail}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
