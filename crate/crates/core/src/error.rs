//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown channel id {0}")]
    UnknownChannel(u16),

    #[error("image {h}x{w} not divisible by patch size {p}")]
    NonDivisible { h: usize, w: usize, p: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask ratio {0} out of range [0,1)")]
    InvalidMaskRatio(f64),

    #[error("channel mask ratio {0} would mask every channel")]
    ChannelRatioMasksAll(f64),

    #[error("mask plan does not match sequence: {0}")]
    PlanMismatch(String),

    #[error("no visible patches after masking")]
    AllMasked,

    #[error("no memory tokens in this model")]
    NoMemoryTokens,

    #[error("no patch tokens in sequence")]
    NoPatchTokens,

    #[error("unknown pooling mode {0}")]
    UnknownPoolMode(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} ({which})")]
    NonFiniteLoss { step: usize, which: String },

    #[error("gradient check failed: non-finite loss while perturbing {path}")]
    NonFiniteGradCheck { path: String },

    #[error("channel subset is empty")]
    EmptySubset,

    #[error("no novel channels present in fine-tuning images")]
    NoNovelChannels,

    #[error("mcif: {0}")]
    Mcif(#[from] McifError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Errors specific to the MCIF image container.
#[derive(Debug, Error)]
pub enum McifError {
    #[error("bad magic (expected MCIF)")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("file truncated: wanted {wanted} more bytes")]
    Truncated { wanted: usize },
    #[error("channel count disagreement: header says {header}, found {found}")]
    ChannelCount { header: usize, found: usize },
    #[error("duplicate channel id {0}")]
    DuplicateChannel(u16),
    #[error("trailing bytes after image payload")]
    TrailingBytes,
}

pub type Result<T> = std::result::Result<T, Error>;
