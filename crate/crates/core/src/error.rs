use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("stream integrity: {0}")]
    StreamIntegrity(String),

    #[error("numerical health: {0}")]
    NumericalHealth(String),

    #[error("filter diverged at frame {frame}: {msg}")]
    Divergence { frame: usize, msg: String },

    #[error("alignment failed: {0}")]
    Alignment(String),

    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    #[error("non-finite objective at coordinate {coord}: {value}")]
    NonFinite { coord: usize, value: f64 },

    #[error("render error: {0}")]
    Render(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
