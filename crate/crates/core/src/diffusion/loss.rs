use crate::error::{bail, Result};
use crate::model::{AttentionMask, BlockInput, MaskKind, ScaleModel};
use crate::numerics::Tensor;
use crate::tokenizer::{scale_inputs, Codebook, TokenPyramid};

/// Σ over rows of `-log softmax(logits)[row, target]`, accumulated in f64.
pub fn cross_entropy_sum(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (n, v) = logits.dims2()?;
    if n != targets.len() {
        bail!(Shape, "{} targets for {} logit rows", targets.len(), n);
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            bail!(Index, "target {} outside vocabulary of {}", t, v);
        }
        let row = logits.row(i);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
        let lse = row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[t] as f64;
    }
    Ok(total)
}

fn blocks_for(pyramid: &TokenPyramid, codebook: &Codebook) -> Result<Vec<BlockInput>> {
    pyramid.check_vocab(codebook.vocab_size())?;
    let inputs = scale_inputs(pyramid, codebook)?;
    Ok(pyramid
        .schedule
        .sides()
        .iter()
        .zip(inputs)
        .map(|(&side, features)| BlockInput { side, features })
        .collect())
}

fn class_of(model: &dyn ScaleModel, pyramid: &TokenPyramid) -> usize {
    pyramid.class_label.unwrap_or(model.null_class())
}

/// Chain of one-step transitions: each scale is scored from its own block
/// alone, conditioned on the previous scale through its input features.
/// Mean over all tokens.
pub fn sdd_loss(model: &dyn ScaleModel, pyramid: &TokenPyramid, codebook: &Codebook) -> Result<f64> {
    if model.mask_kind() != MaskKind::Markovian {
        bail!(Contract, "sdd_loss needs a Markovian model, got {}", model.mask_kind());
    }
    let blocks = blocks_for(pyramid, codebook)?;
    let class = class_of(model, pyramid);
    let mut total = 0.0;
    for (block, tokens) in blocks.into_iter().zip(&pyramid.tokens) {
        let mask = AttentionMask::for_blocks(MaskKind::Markovian, &[tokens.len()]);
        let logits = model.logits(std::slice::from_ref(&block), class, &mask)?;
        total += cross_entropy_sum(&logits, tokens)?;
    }
    Ok(total / pyramid.schedule.token_count() as f64)
}

/// Teacher-forced next-scale likelihood from one pass over the whole
/// sequence under the model's own mask. Mean over all tokens.
pub fn var_loss(model: &dyn ScaleModel, pyramid: &TokenPyramid, codebook: &Codebook) -> Result<f64> {
    let mask = AttentionMask::for_blocks(model.mask_kind(), &pyramid.schedule.block_lens());
    var_loss_with_mask(model, pyramid, codebook, &mask)
}

/// [`var_loss`] under an explicit mask.
pub fn var_loss_with_mask(
    model: &dyn ScaleModel,
    pyramid: &TokenPyramid,
    codebook: &Codebook,
    mask: &AttentionMask,
) -> Result<f64> {
    let blocks = blocks_for(pyramid, codebook)?;
    let logits = model.logits(&blocks, class_of(model, pyramid), mask)?;
    Ok(cross_entropy_sum(&logits, &pyramid.flat())? / pyramid.schedule.token_count() as f64)
}
