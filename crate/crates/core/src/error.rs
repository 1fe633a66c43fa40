use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("core filter with k={k} removed every interaction")]
    EmptyAfterFilter { k: usize },

    #[error("user {user} has {count} interactions; at least 3 are needed to split")]
    Split { user: usize, count: usize },

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("could not parse {expected} personas from response (got {found})")]
    PersonaParse { expected: usize, found: usize },

    #[error("negative sampling failed: {0}")]
    Sampling(String),

    #[error("training diverged at {stage} step {step}: loss = {loss}")]
    Training {
        stage: &'static str,
        step: usize,
        loss: f64,
    },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("clustering failed: {0}")]
    Clustering(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("bad embedding file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
