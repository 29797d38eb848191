//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not conform for the named operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A forward value or gradient became non-finite, or a numeric
    /// precondition (nonzero norm, positive scale) was violated.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A word outside the closed vocabulary.
    #[error("out-of-vocabulary word: {0:?}")]
    Vocabulary(String),

    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint container does not start with the expected magic/layout.
    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    /// Truncated file or checksum mismatch.
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    /// A training schedule finished without reaching its target.
    #[error("training failure: {0}")]
    Training(String),

    /// A pipeline stage failed; wraps the underlying cause.
    #[error("stage {stage:?} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    /// Exit code the CLI maps this error to: config errors are 2,
    /// everything else is a stage failure (1).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Stage { source, .. } => source.exit_code().max(1),
            _ => 1,
        }
    }
}
