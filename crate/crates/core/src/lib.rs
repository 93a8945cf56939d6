//! Multi-channel masked-autoencoder vision transformer, desk scale.
//!
//! The crate is organized around a small tensor/autodiff backend
//! ([`numerics`]) on top of which the model pieces are built:
//!
//! - [`tokenizer`]: per-channel patchification and token assembly
//!   (CLS, memory tokens, channel tokens, positional embeddings)
//! - [`masking`]: dynamic channel-patch masking plus the baseline
//!   masking strategies, all seed-deterministic
//! - [`encoder`]: pre-norm transformer encoder over visible tokens,
//!   with attention diagnostics
//! - [`decoder`]: channel-aware decoder (shared mask token, additive
//!   channel tokens, linear pixel head)
//! - [`fusion`]: hybrid token fusion head and the pooling baselines
//! - [`losses`]: masked pixel L2, Fourier-amplitude L1, task loss and
//!   the blended final objective
//! - [`data`]: synthetic cross-channel dataset generator and the MCIF
//!   on-disk image format
//! - [`harness`]: training loop, evaluation protocols, channel-token
//!   fine-tuning, checkpointing
//!
//! Everything is CPU-only and deterministic under explicit seeds.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod losses;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod seeds;
pub mod stats;
pub mod tokenizer;

pub use error::{Error, Result};
pub use numerics::{Dtype, Scalar, Tape, Tensor, Var};
