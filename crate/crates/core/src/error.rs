use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HtmError {
    #[error("invalid configuration at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("{0}")]
    Tensor(#[from] htm_tensor::TensorError),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("no path from node {start} to node {goal}")]
    NoPath { start: usize, goal: usize },
    #[error("wrong weight scheme: {0}")]
    Scheme(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl HtmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HtmError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HtmError>;
