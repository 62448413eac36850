use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown system `{name}` (available: {available})")]
    UnknownSystem { name: String, available: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("failed to parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch} (loss {loss}); try a lower learning rate")]
    Diverged { epoch: usize, loss: f64 },

    #[error("t-SNE gradient became non-finite at iteration {iteration} (max |grad| {max_gradient})")]
    NonFiniteGradient { iteration: usize, max_gradient: f64 },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InsufficientData(_) => 3,
            Error::Incompatible(_) => 4,
            Error::Numerical(_) | Error::Diverged { .. } | Error::NonFiniteGradient { .. } => 1,
            _ => 2,
        }
    }
}
