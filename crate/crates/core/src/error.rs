use thiserror::Error;

/// Error type shared by every subsystem in this crate.
#[derive(Debug, Error)]
pub enum InifError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    BadVersion(u8),
    #[error("truncated payload: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid roi: {0}")]
    InvalidRoi(String),
    #[error("budget infeasible: {0}")]
    BudgetInfeasible(String),
    #[error("diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("malformed bundle: {0}")]
    MalformedBundle(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("rate target infeasible: {0}")]
    RateTargetInfeasible(String),
    #[error("chunk {chunk} failed: {source}")]
    ChunkFailed {
        chunk: usize,
        #[source]
        source: Box<InifError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, InifError>;
