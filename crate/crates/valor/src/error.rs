//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for an operation. Names both shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Index outside a valid range (vocabulary ids, row/column indices).
    #[error("index error: {0}")]
    Index(String),

    /// Input data violates a documented precondition.
    #[error("input error: {0}")]
    Input(String),

    /// Caller broke an operation contract (empty batch, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Configuration is internally inconsistent or incompatible with the data.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite values where finite math was required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("checkpoint error: bad magic bytes")]
    CheckpointBadMagic,

    /// Checkpoint format version differs from what this build writes.
    #[error("checkpoint error: version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    /// Checkpoint file ended mid-record.
    #[error("checkpoint error: truncated file while reading {0}")]
    CheckpointTruncated(String),

    /// A stored tensor does not match the shape the config implies.
    #[error("checkpoint error: tensor '{name}' has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    /// A tensor named in the checkpoint is unknown, or a required one is missing.
    #[error("checkpoint error: {0}")]
    CheckpointRecord(String),
}
