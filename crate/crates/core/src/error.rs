use std::io;

use thiserror::Error;

pub type Result<T, E = VigError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VigError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("degenerate batch: batch norm in train mode needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),

    #[error("empty neighborhood: max reduction over zero rows")]
    EmptyNeighborhood,

    #[error("insufficient nodes: k * dilation = {needed} but only {available} candidates")]
    InsufficientNodes { needed: usize, available: usize },

    #[error("head split error: {heads} heads do not divide width {width}")]
    HeadSplit { heads: usize, width: usize },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl VigError {
    /// Process exit status for the command-line tool: 2 for configuration problems,
    /// 3 for everything that goes wrong at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            VigError::Config { .. } => 2,
            _ => 3,
        }
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        VigError::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        VigError::Dimension(msg.into())
    }
}
