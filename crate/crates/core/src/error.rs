use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor is detached from this tape")]
    DetachedTensor,
    #[error("tape already consumed by a backward pass; re-run forward first")]
    TapeConsumed,
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("timestamps not strictly increasing at index {index}")]
    NonMonotonicTimestamps { index: usize },
    #[error("missing rate {0} outside [0, 1)")]
    RateOutOfRange(f64),
    #[error("series too short: need {needed} observations, have {available}")]
    SeriesTooShort { needed: usize, available: usize },
    #[error("bad split fractions: {0}")]
    BadFractions(String),
    #[error("degenerate time span: start must precede end")]
    DegenerateSpan,
    #[error("variable {0} has no observed entries in the window")]
    AllNullVariable(usize),
    #[error("bad generator parameters: {0}")]
    BadParams(String),

    #[error("embedding dimension {0} must be even")]
    OddDimension(usize),
    #[error("time feature `{field}` = {value} outside [-0.5, 0.5]")]
    FieldOutOfRange { field: &'static str, value: f64 },
    #[error("time {time} outside the embedding table span [{min}, {max}]")]
    TimeOutOfTableRange { time: f64, min: f64, max: f64 },
    #[error("window of {count} positions exceeds table length {max_len}")]
    WindowTooLong { count: usize, max_len: usize },
    #[error("too few samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("correlation undefined: embedding distances have zero variance")]
    UndefinedCorrelation,

    #[error("need at least 2 knots, got {0}")]
    TooFewKnots(usize),
    #[error("knot times not strictly increasing at index {0}")]
    NonMonotonicKnots(usize),
    #[error("hidden state diverged at solver step {step}")]
    NonFiniteState { step: usize },

    #[error("target mask selects no entries")]
    EmptyMask,
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("dataset contains no windows")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("aggregation cell has no rows")]
    EmptyCell,

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
