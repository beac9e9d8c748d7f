//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by the differentiable tensor engine.
#[derive(Debug, Clone, Error)]
pub enum TensorError {
    #[error("shape mismatch in `{op}`: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape for `{op}`: got {shape:?} ({detail})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    #[error("numeric fault in `{op}`: non-finite value produced")]
    NumericFault { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("tensors belong to different graphs (op `{op}`)")]
    GraphMismatch { op: &'static str },
    #[error("stale tensor: graph was reset since this tensor was recorded (op `{op}`)")]
    StaleTensor { op: &'static str },
    #[error("gradient target is a scalar-output requirement: output has {numel} elements")]
    NotScalarOutput { numel: usize },
    #[error("gradient target does not require grad")]
    RequiresGradMissing,
    #[error("op `{op}` has no double-backward rule")]
    UnsupportedDoubleBackward { op: &'static str },
}

/// Errors raised by models, training, attacks and defenses.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("structural error: {0}")]
    Structure(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("degenerate estimate: {0}")]
    DegenerateEstimate(String),
    #[error("attack failed: all {seeds} seeds hit numeric faults ({diagnostics})")]
    AttackFailed { seeds: usize, diagnostics: String },
    #[error("training halted at iteration {at}: {cause}")]
    TrainingHalted { at: u64, cause: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
