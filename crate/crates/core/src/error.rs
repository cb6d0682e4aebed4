use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes disagree; `axes` names the offending dimensions.
    #[error("shape mismatch in {op}: {axes}")]
    Shape { op: &'static str, axes: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0} is not a scalar")]
    NotScalar(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },

    #[error("malformed {kind} data: {reason}")]
    Format { kind: &'static str, reason: String },

    /// A checkpoint's spec or parameter registry does not match what was expected.
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, axes: impl Into<String>) -> Self {
        Error::Shape { op, axes: axes.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
