use std::path::PathBuf;

use steerlab_core::Error as CoreError;
use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

/// Failures grouped by the process exit code they map to.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training failed: {0}")]
    Training(CoreError),
    #[error("steering diverged: {0}")]
    Steering(String),
    #[error("checkpoint not found: {}", .0.display())]
    Missing(PathBuf),
    #[error("{0}")]
    Other(String),
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Training(_) => 3,
            LabError::Steering(_) => 4,
            LabError::Missing(_) => 5,
            LabError::Other(_) => 1,
        }
    }

    /// Classify a core error raised while loading inputs or writing outputs.
    pub fn io(e: CoreError) -> Self {
        match e {
            CoreError::ConfigInvalid(m) | CoreError::InsufficientVariety(m) => LabError::Config(m),
            CoreError::MissingArtifact(p) | CoreError::MissingImage(p) => LabError::Missing(p),
            other => LabError::Other(other.to_string()),
        }
    }

    /// Classify a core error raised inside a training loop.
    pub fn training(e: CoreError) -> Self {
        match e {
            CoreError::ConfigInvalid(_)
            | CoreError::MissingArtifact(_)
            | CoreError::MissingImage(_)
            | CoreError::Io(_) => Self::io(e),
            other => LabError::Training(other),
        }
    }
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Other(e.to_string())
    }
}
