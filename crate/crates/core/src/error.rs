//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by codebook construction, quantization, and the
/// checkpoint codec.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bit width {0} out of range (expected 1..=8)")]
    InvalidBitWidth(u8),

    #[error("probability {0} outside the open interval (0, 1)")]
    InvalidProbability(f64),

    #[error("interval ({0}, {1}] carries no probability mass")]
    EmptyInterval(f64, f64),

    #[error("iteration did not converge within {0} steps")]
    NonConvergence(usize),

    #[error("input is empty")]
    EmptyInput,

    #[error("cluster count must be at least 1")]
    InvalidClusterCount,

    #[error("block count {block_count} invalid for {elements} elements")]
    InvalidBlockCount { block_count: usize, elements: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bit width mismatch: tensor has {tensor}, codebook has {codebook}")]
    BitWidthMismatch { tensor: u8, codebook: u8 },

    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),

    #[error("bad magic bytes (not a checkpoint stream)")]
    BadMagic,

    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated stream: needed {needed} more bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("duplicate tensor name {0:?}")]
    NameCollision(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
