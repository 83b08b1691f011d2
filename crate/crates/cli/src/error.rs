use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] suture_core::Error),

    #[error("cannot parse config {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },

    #[error("{dir} already holds output from different settings; rerun with --force to replace it")]
    Conflict { dir: PathBuf },

    #[error("unsupported backend {0:?} in SUTURE_BACKEND; only \"cpu\" is available")]
    Backend(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Core(suture_core::Error::config(field, message))
    }

    pub fn missing(path: impl Into<PathBuf>, hint: impl Into<String>) -> Self {
        CliError::Core(suture_core::Error::ArtifactMissing {
            path: path.into(),
            hint: hint.into(),
        })
    }
}
