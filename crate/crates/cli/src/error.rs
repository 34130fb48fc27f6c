use std::path::{Path, PathBuf};

use silm_core::model::checkpoint::CheckpointError;
use silm_core::model::ModelError;
use silm_core::scene::SceneError;
use silm_core::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. } => 1,
            Self::Validation(_) => 2,
            Self::Numeric(_) => 3,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Scene-file errors carry the file name; only a failed read is an I/O error.
pub fn scene_error(path: &Path, e: SceneError) -> CliError {
    match e {
        SceneError::Io(source) => CliError::io(path, source),
        other => CliError::invalid(format!("{}: {other}", path.display())),
    }
}

pub fn checkpoint_error(path: &Path, e: CheckpointError) -> CliError {
    match e {
        CheckpointError::Io(source) => CliError::io(path, source),
        other => CliError::invalid(format!("{}: {other}", path.display())),
    }
}

pub fn model_error(e: ModelError) -> CliError {
    CliError::invalid(e.to_string())
}

pub fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::DivergenceDetected { .. } => CliError::Numeric(e.to_string()),
        TrainError::Model(m) => model_error(m),
        other => CliError::invalid(other.to_string()),
    }
}
