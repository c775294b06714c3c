use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the pipeline. Variants are kept
/// distinct where callers (and tests) need to tell failure modes apart.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("unknown magic number {0:?} (expected P5 or P6)")]
    PnmMagic(String),

    #[error("malformed pnm header: {0}")]
    PnmHeader(String),

    #[error("truncated pnm payload: expected {expected} bytes, found {found}")]
    PnmTruncated { expected: usize, found: usize },

    #[error("unsupported pnm bit depth: maxval {0} (only 8-bit samples are supported)")]
    PnmDepth(u32),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid network config: {0}")]
    Config(String),

    #[error("manifest row {row}: {reason}")]
    ManifestRow { row: usize, reason: String },

    #[error("not a checkpoint file (bad magic)")]
    CheckpointMagic,

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("truncated checkpoint file")]
    CheckpointTruncated,

    #[error("checkpoint does not match the network config: {0}")]
    CheckpointShape(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("label index {0} out of range")]
    BadLabel(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
