use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::fitter::FitTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent sizes, bad hyperparameters, unsupported options.
    #[error("configuration error: {0}")]
    Config(String),

    /// Data that violates a precondition (dimension mismatch, zero mass, ...).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    /// The minimax loop left the stable regime; the trace covers every
    /// completed outer step.
    #[error("fit diverged at outer step {step}: objective {value}")]
    Diverged {
        step: usize,
        value: f64,
        trace: Box<FitTrace>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::Diverged { .. } | Error::Autodiff(_)
        )
    }
}
