use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty tensor")]
    EmptyTensor,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid bit width {0} (expected 1, 2, 4 or 8)")]
    InvalidBitWidth(u32),
    #[error("scale exponent {0} outside [-31, 31]")]
    ScaleRange(i32),
    #[error("value {value} at index {index} does not fit in {bits} bits")]
    ValueRange { index: usize, value: i64, bits: u32 },
    #[error("operand out of range: {0}")]
    OperandRange(String),
    #[error("32-bit accumulator overflow")]
    AccOverflow,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty pooling window")]
    EmptyPool,
    #[error("average pooling over {0} elements is not a power of two")]
    UnsupportedPoolSize(usize),
    #[error("invalid program: {0}")]
    ProgramInvalid(String),
    #[error("layer {layer}: unsupported layer kind `{kind}`")]
    UnsupportedLayer { layer: usize, kind: String },
    #[error("layer {layer}: {msg}")]
    Sizing { layer: usize, msg: String },
    #[error("layer {layer}: {msg}")]
    Model { layer: usize, msg: String },
    #[error("calibration error: {0}")]
    Calib(String),
    #[error("invalid filter spec: {0}")]
    FilterSpec(String),
    #[error("no votes to aggregate")]
    EmptyVote,
    #[error("expected {expected} votes, got {got}")]
    VoteCount { expected: usize, got: usize },
    #[error("invalid trace: {0}")]
    TraceInvalid(String),
    #[error("invalid hardware config: {0}")]
    HwConfig(String),
    #[error("format error at {location}: {msg}")]
    Format { location: String, msg: String },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::ProgramInvalid(msg.into())
    }

    pub(crate) fn format(location: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            msg: msg.into(),
        }
    }
}
