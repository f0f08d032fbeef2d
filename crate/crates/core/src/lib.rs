//! Next-scale visual generation viewed as discrete diffusion.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: `f32` tensors, reverse-mode autodiff, AdamW.
//! - [`tokenizer`]: multi-scale residual quantization of pixel latents.
//! - [`diffusion`]: categorical transition matrices, the masking view of
//!   autoregression, and the two training losses.
//! - [`model`]: decoder-only transformer with block-causal or Markovian
//!   attention over scale blocks, checkpoints and training.
//! - [`sampler`]: scale-wise generation with guidance, simple and masked
//!   resampling, and zero-shot editing.
//! - [`distill`]: schedule pruning, student fine-tuning, cost accounting.
//! - [`harness`]: toy data, metrics, experiment driver and CLI.

mod container;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod harness;
pub mod image;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod tokenizer;

pub use error::{Error, Result};
