use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A domain type's invariant does not hold.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("extraction failed for {emotion} at layer {layer}: {reason}")]
    Extraction {
        emotion: String,
        layer: usize,
        reason: String,
    },

    #[error("zero-norm vector for '{0}'; cosine is undefined")]
    ZeroNorm(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("emotion order mismatch: {0}")]
    Alignment(String),

    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("backend '{backend}' cannot {action}")]
    Capability { backend: String, action: String },

    #[error("condition {0} absent")]
    MissingCondition(char),
}
