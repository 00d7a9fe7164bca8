use thiserror::Error;

/// Errors raised by tensor construction, tape operations, and the optimizer.
#[derive(Debug, Error)]
pub enum TensorError {
    /// A shape precondition failed. The message names the offending dimension.
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation produced a NaN or infinite value.
    #[error("non-finite value in `{node}` (op {op}) at element {index}")]
    NonFinite {
        op: &'static str,
        node: String,
        index: usize,
    },

    /// `log` was asked to evaluate a non-positive input.
    #[error("log domain error: element {index} is {value} (must be > 0)")]
    LogDomain { index: usize, value: f64 },

    /// `backward` requires a scalar loss.
    #[error("backward requires a scalar loss, got {len} elements")]
    NonScalarLoss { len: usize },

    /// Optimizer step on a parameter whose gradient was never populated.
    #[error("parameter `{name}` has no gradient")]
    MissingGrad { name: String },

    /// Optimizer state does not match the parameter shape.
    #[error("optimizer state length {state} does not match parameter length {param}")]
    StateShape { state: usize, param: usize },

    /// Invalid tensor construction.
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
}

/// Errors raised by checkpoint serialization.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected \"DRSM\"")]
    BadMagic,

    #[error("unsupported checkpoint version {found}")]
    UnsupportedVersion { found: u32 },

    #[error("config hash mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    HashMismatch { stored: u64, computed: u64 },

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
