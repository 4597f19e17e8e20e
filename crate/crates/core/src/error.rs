use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulation, training, attack and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("capability disabled: {0}")]
    CapabilityDisabled(&'static str),

    #[error("invalid state: {0}")]
    State(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    TrainingDiverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("parse error in {source_name} at byte offset {offset}: {msg}")]
    Parse {
        source_name: String,
        offset: usize,
        msg: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(
        "schema version {found} is not supported (expected {expected}); migrate the file first"
    )]
    SchemaVersion { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
