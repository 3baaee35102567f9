use thiserror::Error;

/// Errors raised while reading LibSVM text.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("line {line}: malformed token `{token}`")]
    MalformedToken { line: usize, token: String },
    #[error("line {line}: bad label `{token}`")]
    BadLabel { line: usize, token: String },
    #[error("line {line}: feature index must be >= 1")]
    ZeroIndex { line: usize },
    #[error("line {line}: feature indices not strictly increasing ({prev} then {next})")]
    NonIncreasing { line: usize, prev: u32, next: u32 },
    #[error("line {line}: non-finite value")]
    NonFinite { line: usize },
    #[error("dimension override {dim} smaller than max feature index {max_index}")]
    DimTooSmall { dim: usize, max_index: usize },
    #[error("dataset contains no samples")]
    Empty,
    #[error("read failed: {0}")]
    Io(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix not positive definite: pivot {index} is {value}")]
    NotPositiveDefinite { index: usize, value: f64 },

    #[error("{n_clients} clients do not divide {n_samples} samples; set dataset.truncate_to_multiple = true to drop the remainder")]
    UnevenSplit { n_samples: usize, n_clients: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("quantization level {level} out of range [0, {max}] at element {index}")]
    LevelOutOfRange { index: usize, level: u32, max: u32 },

    #[error("malformed quantized message: {0}")]
    MalformedMessage(String),

    #[error("gather for round {round} expected {expected} clients, missing client {missing}")]
    MissingClient {
        round: usize,
        expected: usize,
        missing: usize,
    },

    #[error("unknown message kind `{0}`")]
    UnknownKind(String),

    #[error("config: {0}")]
    Config(String),

    #[error("dataset not found: {0}")]
    DatasetMissing(String),

    #[error("numerical failure in round {round}: {source}")]
    Numerical {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_round(self, round: usize) -> Error {
        match self {
            e @ Error::Numerical { .. } => e,
            e => Error::Numerical {
                round,
                source: Box::new(e),
            },
        }
    }

    /// Process exit status for command-line front ends: 2 configuration,
    /// 3 missing dataset, 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnevenSplit { .. } => 2,
            Error::DatasetMissing(_) => 3,
            Error::Numerical { .. } | Error::NotPositiveDefinite { .. } | Error::NonFinite(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
