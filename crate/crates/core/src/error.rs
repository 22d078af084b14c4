use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes that cannot be combined.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A structurally invalid model or training configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("parse error at {path} (line {line}, column {column}): {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("readout state `{state}` is not populated at t={t}")]
    UnreachableReadout { state: String, t: usize },

    #[error("missing batch-norm statistics for node `{node}` at t={t}")]
    MissingBnStats { node: String, t: String },

    #[error("missing parameter group `{0}`")]
    MissingParam(String),

    #[error("missing gradient for parameter group `{0}`")]
    MissingGradient(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("{}: {message} (byte offset {offset})", .file.display())]
    Data {
        file: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("checkpoint config hash {found} does not match {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
