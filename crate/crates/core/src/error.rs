use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite value produced while evaluating a model.
    #[error("non-finite value at step {step}: {what}")]
    Numeric { step: usize, what: String },

    /// Training loss became NaN/inf.
    #[error("training diverged at step {step} (batch {batch}): {what}")]
    Diverged {
        step: usize,
        batch: usize,
        what: String,
    },

    /// Analytic and finite-difference gradients disagree.
    #[error("gradient check failed for {}", .0.join(", "))]
    GradientCheck(Vec<String>),

    /// Some ablation arms could not be trained or evaluated; the others
    /// were reported.
    #[error("ablation arms failed: {}", .0.join(", "))]
    ArmsFailed(Vec<String>),

    #[error("degenerate normalisation statistics: dimension {dim} is constant ({value})")]
    DegenerateStats { dim: usize, value: f64 },

    #[error("unknown phoneme id {id} (vocabulary size {vocab})")]
    Vocabulary { id: usize, vocab: usize },

    /// Malformed file contents (TNSR, checkpoint, manifest, PGM).
    #[error("format error: {0}")]
    Format(String),

    /// Configuration failed schema validation; carries the offending keys.
    #[error("config schema error: {}", .0.join(", "))]
    Schema(Vec<String>),

    /// Checkpoint does not match the model it is loaded into.
    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
