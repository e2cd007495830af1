use std::path::PathBuf;

use thiserror::Error;

/// A single rejected configuration key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot read volume {}: {message}", path.display())]
    Volume { path: PathBuf, message: String },

    #[error("missing modality {modality} in {}", dir.display())]
    MissingModality { modality: String, dir: PathBuf },

    #[error("illegal label value {value} (allowed: 0, 1, 2, 4)")]
    IllegalLabel { value: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite voxel value in {0}")]
    NonFinite(String),

    #[error("shape too small: {0}")]
    ShapeTooSmall(String),

    #[error("slice index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },

    #[error("invalid network configuration: {0}")]
    Network(String),

    #[error("weight archive: {0}")]
    Archive(String),

    #[error("invalid configuration: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Config(Vec<ConfigIssue>),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unmatched case {0}")]
    UnmatchedCase(String),

    #[error("{0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
