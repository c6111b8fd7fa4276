use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum PatError {
    /// Tensor or array shapes do not fit the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed dataset or manifest file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Malformed or mismatched checkpoint.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// An inner error annotated with where it happened.
    #[error("{context}: {source}")]
    Context { context: String, source: Box<PatError> },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl PatError {
    pub fn context(self, context: impl Into<String>) -> Self {
        PatError::Context { context: context.into(), source: Box::new(self) }
    }

    /// The innermost error, skipping any context wrappers.
    pub fn root(&self) -> &PatError {
        match self {
            PatError::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = PatError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(PatError::Shape(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(PatError::Contract(msg.into()))
}
