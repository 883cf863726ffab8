//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Training produced a non-finite loss; a diagnostic checkpoint may have
    /// been written next to the run artifacts.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    /// A required upstream artifact (checkpoint, buffer manifest, dataset
    /// directory) is missing. `produced_by` names the subcommand that
    /// creates it.
    #[error("missing artifact {path:?}: run `cssl {produced_by}` first")]
    MissingArtifact { path: PathBuf, produced_by: String },

    /// A checkpoint was loaded with a configuration that does not match the
    /// one it was saved with.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Malformed checkpoint, manifest, or config file.
    #[error("parse error in {path:?}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
