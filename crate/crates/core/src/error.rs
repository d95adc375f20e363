use thiserror::Error;

/// Errors raised by kernels, quantizers and the training engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("value {value} does not fit in {bits} bits")]
    ValueOutOfRange { value: u64, bits: u32 },

    #[error("accumulator overflow risk: {bits_a}+{bits_b} bits over {len} elements")]
    AccumulatorOverflow { bits_a: u32, bits_b: u32, len: usize },

    #[error("invalid bitwidth {0}")]
    InvalidBits(u32),

    #[error("invalid affine code: scale {scale}, offset {offset}")]
    InvalidAffine { scale: f64, offset: f64 },

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("activation {value} at index {index} outside [0, 1]; missing bounded activation upstream?")]
    ActivationOutOfRange { index: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty tensor")]
    EmptyTensor,

    #[error("threshold function is not monotone: {0}")]
    NonMonotone(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
