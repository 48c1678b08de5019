use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DtlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DtlError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("no classification head for task `{0}`")]
    MissingHead(String),

    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),

    #[error("run diverged at {stage} epoch {epoch} step {step}: {reason}")]
    Diverged {
        stage: String,
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("computation aborted: {0}")]
    Aborted(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
