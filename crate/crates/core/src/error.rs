use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error: {0}")]
    Stream(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("validation failed for record `{record}`: {reason}")]
    Validation { record: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot normalize zero-norm vector in record `{record}`, layer {layer}, cell ({i}, {j})")]
    ZeroNorm {
        record: String,
        layer: u32,
        i: usize,
        j: usize,
    },

    #[error("cannot normalize: {0}")]
    Normalization(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("need {needed} normal records, found {available}")]
    InsufficientNormals { needed: usize, available: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("gradient check failed for {tensor}[{index}]: analytic {analytic}, numeric {numeric}")]
    GradientMismatch {
        tensor: &'static str,
        index: usize,
        analytic: f64,
        numeric: f64,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
