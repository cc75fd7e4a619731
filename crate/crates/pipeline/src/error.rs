use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] stepmap_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} does not match the manifest (expected sha256 {expected}, found {found})")]
    Tampered {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{0} is not recorded in the manifest; run the producing command first")]
    MissingInput(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{failed} of {total} grid nodes failed")]
    PartialFailure { failed: usize, total: usize },
    #[error("{0}")]
    Threshold(String),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status: 1 usage, 2 validation or contract failure,
    /// 3 partial node failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            Self::PartialFailure { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
