//! Decoder-only transformer over multi-scale token sequences.
//!
//! The whole sequence is the concatenation of one block per scale. A shared
//! boolean mask decides which blocks see which; block `s` is always fed the
//! accumulated reconstruction of scales `< s` pooled to its own side.

mod checkpoint;
mod config;
mod mask;
mod train;
mod transformer;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use mask::{attention_pairs, kv_retention, AttentionMask, AttentionMaskSpec, MaskKind};
pub use train::{fit, train_step, TrainExample, Trainer};
pub use transformer::Transformer;

use crate::error::Result;
use crate::numerics::Tensor;
use crate::tokenizer::ScaleSchedule;

/// Conditioning features for one scale block, `[side², feat_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockInput {
    pub side: usize,
    pub features: Tensor,
}

/// Anything that maps scale blocks to per-position logits.
pub trait ScaleModel {
    fn vocab(&self) -> usize;

    /// Label of the unconditional class.
    fn null_class(&self) -> usize;

    fn schedule(&self) -> &ScaleSchedule;

    fn mask_kind(&self) -> MaskKind;

    /// `[Σ side² × V]` logits for `blocks`, in block order, with attention
    /// restricted by `mask`.
    fn logits(&self, blocks: &[BlockInput], class: usize, mask: &crate::model::AttentionMask) -> Result<Tensor>;
}
