use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed IDX header: {0}")]
    MalformedIdx(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("IDX dimension overflow")]
    DimensionOverflow,
    #[error("insufficient samples: requested {requested}, available {available}")]
    InsufficientSamples { requested: usize, available: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("context count {0} is not a power of two")]
    ContextsNotPowerOfTwo(usize),
    #[error("median cutoff requested without training data")]
    MedianWithoutData,
    #[error("context out of range: {0}")]
    ContextOutOfRange(String),
    #[error("dataset has no contexts; assign contexts before using a gated model")]
    MissingContexts,
    #[error("unknown loss kind `{0}`")]
    UnknownLoss(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("zero-norm snapshot at step {0}")]
    ZeroNormSnapshot(usize),
    #[error("predictor table too large: {0} contexts exceeds the materialization cap")]
    TableTooLarge(usize),
    #[error("table violates the equivariance constraints (max violation {0:e})")]
    NotEquivariant(f64),
    #[error("not separated: context minimum margin {0:e} is not positive")]
    NotSeparated(f64),
    #[error("empty support set; margin tolerance too small")]
    EmptySupport,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
