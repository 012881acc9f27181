use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bit vector contains a non-binary value {value} at index {index}")]
    InvalidBits { index: usize, value: u8 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("doppler aliasing: f_D * T_s = {0} must be below 0.5")]
    Alias(f64),

    #[error("signal has zero mean power")]
    ZeroSignal,

    #[error("signal of {len} samples is shorter than the {window}-sample window")]
    SignalTooShort { len: usize, window: usize },

    #[error("bad shard magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated shard: expected {expected} bytes, found {found}")]
    TruncatedShard { expected: u64, found: u64 },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("projection vector has zero norm")]
    DegenerateProjection,

    #[error("reconstruction loss needs at least one masked token")]
    EmptyMask,

    #[error("contrastive batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("expert output {0} is missing")]
    MissingExpertOutput(usize),

    #[error("class {class:?} has {available} samples, {required} required")]
    InsufficientSamples {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter {0:?}")]
    MissingParam(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
