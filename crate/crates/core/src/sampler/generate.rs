use super::rng::{categorical, uniform, DrawKind};
use super::{guided_logits, sampling_probs, SamplerConfig};
use crate::error::{bail, Result};
use crate::model::{AttentionMask, BlockInput, MaskKind, ScaleModel};
use crate::numerics::Tensor;
use crate::tokenizer::{scale_inputs, Codebook, FeatureAccumulator, TokenPyramid};

/// Output of one generation run.
#[derive(Clone, Debug)]
pub struct GenerationTrace {
    pub pyramid: TokenPyramid,
    /// Accumulated latent `f_N` after the last scale.
    pub feature: Tensor,
    /// Fraction of the scale's tokens redrawn in each masked-resampling pass.
    pub refined: Vec<Vec<f64>>,
}

impl GenerationTrace {
    /// Share of all tokens flagged in the first masked-resampling pass.
    pub fn refined_fraction(&self) -> f64 {
        let sides = self.pyramid.schedule.block_lens();
        let total: usize = sides.iter().sum();
        let flagged: f64 = self
            .refined
            .iter()
            .zip(&sides)
            .map(|(r, &n)| r.first().copied().unwrap_or(0.0) * n as f64)
            .sum();
        flagged / total as f64
    }
}

/// Tokens known ahead of time, per scale, for editing.
pub(crate) struct Known<'a> {
    pub mask: Vec<Vec<bool>>,
    pub truth: &'a TokenPyramid,
}

fn last_rows(t: &Tensor, n: usize) -> Result<Tensor> {
    let (rows, v) = t.dims2()?;
    Tensor::new(&[n, v], t.data()[(rows - n) * v..].to_vec())
}

/// Sampling distribution for the last block of `prefix`, which lists the
/// conditioning inputs of every scale up to and including the current one.
/// Markovian models see only the current block; other masks see the prefix
/// under block-causal attention.
pub fn scale_probs(
    model: &dyn ScaleModel,
    prefix: &[BlockInput],
    class: usize,
    cfg: &SamplerConfig,
) -> Result<Vec<Vec<f64>>> {
    let Some(current) = prefix.last() else {
        bail!(Shape, "empty prefix");
    };
    let n = current.side * current.side;
    let (blocks, mask) = match model.mask_kind() {
        MaskKind::Markovian => (
            std::slice::from_ref(current),
            AttentionMask::for_blocks(MaskKind::Markovian, &[n]),
        ),
        MaskKind::BlockCausal | MaskKind::Full => {
            let lens: Vec<usize> = prefix.iter().map(|b| b.side * b.side).collect();
            (prefix, AttentionMask::for_blocks(MaskKind::BlockCausal, &lens))
        }
    };
    let cond = last_rows(&model.logits(blocks, class, &mask)?, n)?;
    let logits = if cfg.cfg_weight > 0.0 {
        let uncond = last_rows(&model.logits(blocks, model.null_class(), &mask)?, n)?;
        guided_logits(&cond, &uncond, cfg.cfg_weight)?
    } else {
        cond
    };
    sampling_probs(&logits, cfg.temperature, cfg.top_k)
}

fn draw(probs: &[Vec<f64>], seed: u64, scale: usize, kind: DrawKind, pass: usize) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| categorical(p, uniform(seed, scale, kind, pass, i)))
        .collect()
}

/// Base draw followed by `sr_steps - 1` full redraws; the last one is kept.
fn simple_passes(probs: &[Vec<f64>], scale: usize, cfg: &SamplerConfig) -> Vec<usize> {
    let mut h = draw(probs, cfg.seed, scale, DrawKind::Base, 0);
    for pass in 1..cfg.sr_steps {
        h = draw(probs, cfg.seed, scale, DrawKind::Simple, pass);
    }
    h
}

/// Each pass redraws, jointly, every token whose probability is below the
/// threshold at the start of the pass. Returns the flagged fraction per pass.
fn mr_passes(probs: &[Vec<f64>], tokens: &mut [usize], scale: usize, cfg: &SamplerConfig) -> Vec<f64> {
    let n = tokens.len();
    let mut fractions = Vec::with_capacity(cfg.mr_steps);
    for pass in 0..cfg.mr_steps {
        let flagged: Vec<usize> = (0..n)
            .filter(|&i| probs[i][tokens[i]] < cfg.mr_threshold)
            .collect();
        fractions.push(flagged.len() as f64 / n as f64);
        for i in flagged {
            tokens[i] = categorical(&probs[i], uniform(cfg.seed, scale, DrawKind::Masked, pass, i));
        }
    }
    fractions
}

fn check(model: &dyn ScaleModel, codebook: &Codebook, class: usize, cfg: &SamplerConfig) -> Result<()> {
    cfg.validate()?;
    if codebook.vocab_size() != model.vocab() {
        bail!(
            Validation,
            "codebook holds {} entries but the model predicts {}",
            codebook.vocab_size(),
            model.vocab()
        );
    }
    if class > model.null_class() {
        bail!(Index, "class label {} outside 0..={}", class, model.null_class());
    }
    Ok(())
}

pub(crate) fn run(
    model: &dyn ScaleModel,
    codebook: &Codebook,
    class: usize,
    cfg: &SamplerConfig,
    known: Option<&Known>,
) -> Result<GenerationTrace> {
    check(model, codebook, class, cfg)?;
    let schedule = model.schedule().clone();
    let d = codebook.dim();
    let mut acc = FeatureAccumulator::new(schedule.max_side(), d);
    let mut prefix = Vec::with_capacity(schedule.len());
    let mut tokens = Vec::with_capacity(schedule.len());
    let mut refined = Vec::with_capacity(schedule.len());
    for (k, &side) in schedule.sides().iter().enumerate() {
        let features = if k == 0 {
            Tensor::zeros(&[side * side, d])
        } else {
            acc.input_for(side)?
        };
        prefix.push(BlockInput { side, features });
        let probs = scale_probs(model, &prefix, class, cfg)?;
        let mut h = simple_passes(&probs, k, cfg);
        refined.push(mr_passes(&probs, &mut h, k, cfg));
        if let Some(kn) = known {
            for (i, t) in h.iter_mut().enumerate() {
                if kn.mask[k][i] {
                    *t = kn.truth.tokens[k][i];
                }
            }
        }
        acc.add_scale(codebook, &h, side)?;
        tokens.push(h);
    }
    let label = (class != model.null_class()).then_some(class);
    Ok(GenerationTrace {
        pyramid: TokenPyramid::new(schedule, tokens, label)?,
        feature: acc.into_feature(),
        refined,
    })
}

/// Samples a full pyramid; fully determined by the model, codebook, class
/// and `cfg` (including its seed).
pub fn generate(model: &dyn ScaleModel, codebook: &Codebook, class: usize, cfg: &SamplerConfig) -> Result<TokenPyramid> {
    Ok(run(model, codebook, class, cfg, None)?.pyramid)
}

pub fn generate_with_trace(
    model: &dyn ScaleModel,
    codebook: &Codebook,
    class: usize,
    cfg: &SamplerConfig,
) -> Result<GenerationTrace> {
    run(model, codebook, class, cfg, None)
}

fn prefix_for(pyramid: &TokenPyramid, codebook: &Codebook, k: usize) -> Result<Vec<BlockInput>> {
    if k >= pyramid.schedule.len() {
        bail!(Range, "scale {} outside a {}-scale pyramid", k, pyramid.schedule.len());
    }
    let inputs = scale_inputs(pyramid, codebook)?;
    Ok(pyramid.schedule.sides()[..=k]
        .iter()
        .zip(inputs)
        .map(|(&side, features)| BlockInput { side, features })
        .collect())
}

/// Masked resampling of scale `k` of `pyramid` with scales `< k` as
/// context. Returns the refined tokens and the flagged fraction per pass.
pub fn masked_resample(
    model: &dyn ScaleModel,
    codebook: &Codebook,
    pyramid: &TokenPyramid,
    k: usize,
    class: usize,
    cfg: &SamplerConfig,
) -> Result<(Vec<usize>, Vec<f64>)> {
    check(model, codebook, class, cfg)?;
    let prefix = prefix_for(pyramid, codebook, k)?;
    let probs = scale_probs(model, &prefix, class, cfg)?;
    let mut tokens = pyramid.tokens[k].clone();
    let fractions = mr_passes(&probs, &mut tokens, k, cfg);
    Ok((tokens, fractions))
}

/// Redraws scale `k` of `pyramid` `sr_steps` times and keeps the last draw.
pub fn simple_resample(
    model: &dyn ScaleModel,
    codebook: &Codebook,
    pyramid: &TokenPyramid,
    k: usize,
    class: usize,
    cfg: &SamplerConfig,
) -> Result<Vec<usize>> {
    check(model, codebook, class, cfg)?;
    let prefix = prefix_for(pyramid, codebook, k)?;
    let probs = scale_probs(model, &prefix, class, cfg)?;
    Ok(simple_passes(&probs, k, cfg))
}
