use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FaceError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0} is empty")]
    EmptyInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{kind} index {index} out of range (size {size})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        size: usize,
    },

    #[error("unknown token {token:?}; nearest vocabulary matches: {}", suggestions.join(", "))]
    UnknownToken {
        token: String,
        suggestions: Vec<String>,
    },

    #[error("training diverged in stage {stage}, epoch {epoch}, step {step}: {detail}")]
    Diverged {
        stage: u8,
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("stage {required} must complete before stage {requested} can run")]
    StageOrder { required: u8, requested: u8 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FaceError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FaceError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = FaceError> = std::result::Result<T, E>;
