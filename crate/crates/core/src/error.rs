use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("Cholesky factorisation failed at every jitter level tried: {jitters:?}")]
    Cholesky { jitters: Vec<f64> },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite ELBO at step {step}; last good checkpoint: {last_checkpoint:?}")]
    NonFiniteElbo {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Input(_) | Error::Dimension(_) => 2,
            Error::Cholesky { .. }
            | Error::Numerical(_)
            | Error::NonFiniteGradient(_)
            | Error::NonFiniteElbo { .. } => 3,
            Error::Parse { .. } | Error::Checkpoint(_) | Error::Io { .. } => 4,
        }
    }
}
