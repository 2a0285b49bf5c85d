use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SereError>;

#[derive(Debug, Error)]
pub enum SereError {
    #[error("malformed input: {0}")]
    Format(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("class {0} has no labeled samples")]
    MissingClass(usize),

    #[error("no reference available: {0}")]
    Pairing(String),

    #[error("cannot stratify: class {class} has {count} samples, need at least {k}")]
    Stratification { class: usize, count: usize, k: usize },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("loss diverged at epoch {epoch} (value {value})")]
    Divergence { epoch: usize, value: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("incompatible model: {0}")]
    Compatibility(String),

    #[error("projection failed: {0}")]
    Projection(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SereError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SereError::Io {
            path: path.into(),
            source,
        }
    }
}
