use std::path::PathBuf;

use crate::model::Checkpoint;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the workbench can report. Each variant maps onto one of the
/// CLI exit-status classes through [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("record {id}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("line {line}: unknown split tag {tag:?}")]
    UnknownSplit { line: usize, tag: String },

    #[error("record {id}: non-finite value in {field}")]
    NonFiniteValue { id: String, field: &'static str },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("unknown sample id {0:?}")]
    UnknownId(String),

    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },

    #[error("{0}")]
    Model(String),

    #[error("non-finite value in tensor {tensor}")]
    NonFinite { tensor: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        last_good: Box<Checkpoint>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// 2 for configuration problems, 3 for data problems, 4 for numerical
    /// divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFinite { .. } | Error::Diverged { .. } => 4,
            _ => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            4 => "divergence",
            _ => "data",
        }
    }
}
