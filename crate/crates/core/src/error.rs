use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown scheme '{0}', valid schemes: {1}")]
    UnknownScheme(String, String),
    #[error("scheme mismatch: checkpoint declares '{expected}', got '{got}'")]
    SchemeMismatch { expected: String, got: String },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("checkpoint format version {got} unsupported (expected {expected})")]
    CheckpointVersion { expected: u32, got: u32 },
    #[error("truncated checkpoint: {0}")]
    TruncatedCheckpoint(String),
    #[error("manifest error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("unsupported or corrupt image file {path}: {msg}")]
    ImageDecode { path: String, msg: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
