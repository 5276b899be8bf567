use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid chain: {}", .0.join("; "))]
    InvalidChain(Vec<String>),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("failed to parse JSON: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("evolution did not reach terminal mass {target} within {max_iters} iterations (reached {reached})")]
    NonConvergence {
        max_iters: usize,
        target: f64,
        reached: f64,
    },

    #[error("curve never reaches P = 0.5 on the grid (max {max_p} at N = {max_n})")]
    NoCrossing { max_n: u64, max_p: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("width mismatch: expected {expected} bits, got {got}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Dataset(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for numerical non-convergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. } | Error::NoCrossing { .. } => 2,
            _ => 1,
        }
    }
}
