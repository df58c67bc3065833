use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A layer received an input whose shape does not chain with its definition.
    #[error("shape mismatch in layer `{layer}`: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        got: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed binary file (IDX or ADVW container).
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    /// Candidate selection could not satisfy the requested count.
    #[error("only {available} candidates qualify, {requested} requested")]
    NotEnoughCandidates { available: usize, requested: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
