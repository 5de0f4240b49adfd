//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    /// Too many rows of a check-in source were rejected.
    #[error("corpus quality: {rejected} of {total} rows rejected")]
    CorpusQuality { rejected: usize, total: usize },

    /// Detokenization hit a token that cannot be mapped back to text.
    #[error("lossy round trip: {0}")]
    Lossy(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Non-finite loss or another numerical failure during optimization.
    #[error("training diverged at step {step}: {msg}")]
    Training { step: u64, msg: String },

    #[error("missing upstream artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("stale artifact {}: {msg}", .path.display())]
    Stale { path: PathBuf, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("working directory is locked by {}", .0.display())]
    Locked(PathBuf),
}

impl Error {
    /// Process exit status: 2 configuration, 3 data, 4 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Locked(_) | Error::MissingArtifact(_) | Error::Stale { .. } => 2,
            Error::Input(_)
            | Error::Io { .. }
            | Error::Format { .. }
            | Error::CorpusQuality { .. }
            | Error::Lossy(_)
            | Error::Checkpoint(_) => 3,
            Error::Training { .. } => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
