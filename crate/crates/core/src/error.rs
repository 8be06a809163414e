use thiserror::Error;

/// Errors surfaced by the tensor, quantization and training modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("cast_to_storage only handles f32/f16; use quant module")]
    UnsupportedCast,

    #[error("po2 bias undefined for zero tensor")]
    ZeroTensor,

    #[error("invalid quantizer width {0}: expected 2..=8")]
    InvalidWidth(u8),

    #[error("batch size must be at least 2 for batch statistics, got {0}")]
    BatchTooSmall(usize),

    #[error("missing cached forward state: {0}")]
    MissingForwardState(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numeric failure: NaN loss in layer {layer} during {phase}")]
    NumericFailure { layer: usize, phase: String },

    #[error("cost model missing entry: {0}")]
    MissingCostEntry(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
