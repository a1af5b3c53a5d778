use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    /// Rejected before any compute starts.
    #[error("invalid config: {0}")]
    Validation(String),

    /// A numeric failure inside a pipeline stage.
    #[error("{stage} failed: {source}")]
    Numeric {
        stage: String,
        #[source]
        source: pfm_core::Error,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// `compare` input that does not point at a completed run.
    #[error("missing run output: {0}")]
    MissingOutput(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

/// Attaches a stage name to core errors.
pub(crate) trait Stage<T> {
    fn stage(self, stage: impl Into<String>) -> Result<T>;
}

impl<T> Stage<T> for pfm_core::Result<T> {
    fn stage(self, stage: impl Into<String>) -> Result<T> {
        self.map_err(|source| LabError::Numeric {
            stage: stage.into(),
            source,
        })
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
    let path = path.into();
    move |source| LabError::Io { path, source }
}
