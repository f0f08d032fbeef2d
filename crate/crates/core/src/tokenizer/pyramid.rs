use std::io::{Read, Write};

use super::resample::{downsample, upsample};
use super::{Codebook, ScaleSchedule};
use crate::error::{bail, Result};
use crate::numerics::Tensor;

const PYRAMID_MAGIC: &[u8; 4] = b"SRDP";
const PYRAMID_VERSION: u16 = 1;

/// Per-scale token grids; grid `k` is `sides[k] × sides[k]`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPyramid {
    pub schedule: ScaleSchedule,
    pub tokens: Vec<Vec<usize>>,
    pub class_label: Option<usize>,
}

impl TokenPyramid {
    pub fn new(schedule: ScaleSchedule, tokens: Vec<Vec<usize>>, class_label: Option<usize>) -> Result<Self> {
        if tokens.len() != schedule.len() {
            bail!(Shape, "{} token grids for a {}-scale schedule", tokens.len(), schedule.len());
        }
        for (k, grid) in tokens.iter().enumerate() {
            if grid.len() != schedule.block_len(k) {
                bail!(
                    Shape,
                    "scale {} grid holds {} tokens, expected {}",
                    k,
                    grid.len(),
                    schedule.block_len(k)
                );
            }
        }
        Ok(Self {
            schedule,
            tokens,
            class_label,
        })
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        for (k, grid) in self.tokens.iter().enumerate() {
            if let Some(&t) = grid.iter().find(|&&t| t >= vocab) {
                bail!(Index, "scale {} holds token {} outside vocabulary of {}", k, t, vocab);
            }
        }
        Ok(())
    }

    /// All tokens, coarse to fine.
    pub fn flat(&self) -> Vec<usize> {
        self.tokens.iter().flatten().copied().collect()
    }

    /// Re-slices this pyramid onto a sub-schedule; every retained side must
    /// already be present.
    pub fn restrict(&self, sub: &ScaleSchedule) -> Result<Self> {
        let tokens = sub
            .sides()
            .iter()
            .map(|&s| match self.schedule.position(s) {
                Some(k) => Ok(self.tokens[k].clone()),
                None => bail!(Validation, "side {} not in schedule {}", s, self.schedule),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sub.clone(), tokens, self.class_label)
    }

    /// Binary layout: `"SRDP"`, version `u16`, scale count `u16`, sides
    /// (`u16` each), vocabulary `u32`, then every grid as little-endian `u32`
    /// row-major.
    pub fn write_to<W: Write>(&self, mut w: W, vocab: usize) -> Result<()> {
        self.check_vocab(vocab)?;
        w.write_all(PYRAMID_MAGIC)?;
        w.write_all(&PYRAMID_VERSION.to_le_bytes())?;
        w.write_all(&(self.schedule.len() as u16).to_le_bytes())?;
        for &s in self.schedule.sides() {
            w.write_all(&(s as u16).to_le_bytes())?;
        }
        w.write_all(&(vocab as u32).to_le_bytes())?;
        for &t in self.tokens.iter().flatten() {
            w.write_all(&(t as u32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Returns the pyramid and its declared vocabulary size.
    pub fn read_from<R: Read>(mut r: R) -> Result<(Self, usize)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PYRAMID_MAGIC {
            bail!(Format, "not a pyramid file (magic {:?})", magic);
        }
        let version = read_u16(&mut r)?;
        if version != PYRAMID_VERSION {
            bail!(Format, "unsupported pyramid version {}", version);
        }
        let count = read_u16(&mut r)? as usize;
        let sides = (0..count)
            .map(|_| read_u16(&mut r).map(usize::from))
            .collect::<Result<Vec<_>>>()?;
        let schedule = ScaleSchedule::new(sides)?;
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        let vocab = u32::from_le_bytes(buf) as usize;
        let mut tokens = Vec::with_capacity(count);
        for k in 0..count {
            let mut grid = Vec::with_capacity(schedule.block_len(k));
            for _ in 0..schedule.block_len(k) {
                r.read_exact(&mut buf)?;
                grid.push(u32::from_le_bytes(buf) as usize);
            }
            tokens.push(grid);
        }
        let p = Self::new(schedule, tokens, None)?;
        p.check_vocab(vocab)?;
        Ok((p, vocab))
    }
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

/// Running sum `f_k = Σ_{j ≤ k} upsample(embed(tokens_j), N)`.
#[derive(Clone, Debug)]
pub struct FeatureAccumulator {
    sum: Tensor,
}

impl FeatureAccumulator {
    pub fn new(side: usize, dim: usize) -> Self {
        Self {
            sum: Tensor::zeros(&[side, side, dim]),
        }
    }

    pub fn add_scale(&mut self, codebook: &Codebook, tokens: &[usize], side: usize) -> Result<()> {
        let n = self.sum.shape()[0];
        let up = upsample(&codebook.embed(tokens, side)?, n)?;
        self.sum.add_assign(&up)
    }

    /// Accumulated feature pooled to `side`, flattened to `[side², d]`.
    pub fn input_for(&self, side: usize) -> Result<Tensor> {
        let d = self.sum.shape()[2];
        downsample(&self.sum, side)?.reshape(&[side * side, d])
    }

    pub fn feature(&self) -> &Tensor {
        &self.sum
    }

    pub fn into_feature(self) -> Tensor {
        self.sum
    }
}

/// Teacher-forcing inputs for every scale: scale 0 gets zeros (its tokens
/// are conditioned on the start token), scale `k ≥ 1` gets the accumulated
/// reconstruction of scales `< k` pooled to `sides[k]`, as `[sides[k]², d]`.
pub fn scale_inputs(pyramid: &TokenPyramid, codebook: &Codebook) -> Result<Vec<Tensor>> {
    let schedule = &pyramid.schedule;
    let d = codebook.dim();
    let mut acc = FeatureAccumulator::new(schedule.max_side(), d);
    let mut inputs = Vec::with_capacity(schedule.len());
    for (k, &side) in schedule.sides().iter().enumerate() {
        if k == 0 {
            inputs.push(Tensor::zeros(&[side * side, d]));
        } else {
            inputs.push(acc.input_for(side)?);
        }
        acc.add_scale(codebook, &pyramid.tokens[k], side)?;
    }
    Ok(inputs)
}

/// Pyramid plus the residual norm before the first scale and after each scale.
#[derive(Clone, Debug)]
pub struct EncodeTrace {
    pub pyramid: TokenPyramid,
    pub residual_norms: Vec<f64>,
    /// True when the fine-scale-only pyramid reconstructed better than the
    /// residual scheme and was emitted instead.
    pub fine_only: bool,
}

/// Residual multi-scale quantization; see [`encode_with_trace`].
pub fn encode(feature: &Tensor, schedule: &ScaleSchedule, codebook: &Codebook) -> Result<TokenPyramid> {
    Ok(encode_with_trace(feature, schedule, codebook)?.pyramid)
}

/// Residual multi-scale quantization.
///
/// Starting from `r = feature`, each scale quantizes `downsample(r, side)`
/// and subtracts the upsampled embedding. A scale whose update would grow
/// `‖r‖` emits the zero token instead. If the resulting reconstruction is
/// worse than quantizing the feature at full resolution alone, the pyramid
/// with zero tokens at every coarse scale and that quantization at the last
/// scale is emitted.
pub fn encode_with_trace(
    feature: &Tensor,
    schedule: &ScaleSchedule,
    codebook: &Codebook,
) -> Result<EncodeTrace> {
    let n = schedule.max_side();
    let d = codebook.dim();
    if feature.shape() != [n, n, d] {
        bail!(
            Config,
            "feature {:?} does not match schedule side {} and codebook dim {}",
            feature.shape(),
            n,
            d
        );
    }
    let mut residual = feature.clone();
    let mut norms = vec![residual.sq_norm().sqrt()];
    let mut tokens = Vec::with_capacity(schedule.len());
    for &side in schedule.sides() {
        let coarse = downsample(&residual, side)?;
        let (tok, emb) = codebook.quantize(&coarse)?;
        let candidate = residual.sub(&upsample(&emb, n)?)?;
        let prev = *norms.last().expect("non-empty");
        let cand_norm = candidate.sq_norm().sqrt();
        if cand_norm > prev {
            tokens.push(vec![0; side * side]);
            norms.push(prev);
        } else {
            tokens.push(tok);
            residual = candidate;
            norms.push(cand_norm);
        }
    }
    let multi_err = residual.sq_norm();
    let (fine_tok, fine_emb) = codebook.quantize(feature)?;
    let fine_err = feature.sub(&fine_emb)?.sq_norm();
    if fine_err < multi_err {
        let mut tokens: Vec<Vec<usize>> = schedule.sides().iter().map(|s| vec![0; s * s]).collect();
        *tokens.last_mut().expect("non-empty") = fine_tok;
        let mut norms = vec![norms[0]; schedule.len()];
        norms.push(fine_err.sqrt());
        return Ok(EncodeTrace {
            pyramid: TokenPyramid::new(schedule.clone(), tokens, None)?,
            residual_norms: norms,
            fine_only: true,
        });
    }
    Ok(EncodeTrace {
        pyramid: TokenPyramid::new(schedule.clone(), tokens, None)?,
        residual_norms: norms,
        fine_only: false,
    })
}

/// `Σ_k upsample(embed(tokens_k), N)`.
pub fn decode(pyramid: &TokenPyramid, codebook: &Codebook) -> Result<Tensor> {
    pyramid.check_vocab(codebook.vocab_size())?;
    let schedule = &pyramid.schedule;
    let mut acc = FeatureAccumulator::new(schedule.max_side(), codebook.dim());
    for (k, &side) in schedule.sides().iter().enumerate() {
        acc.add_scale(codebook, &pyramid.tokens[k], side)?;
    }
    Ok(acc.into_feature())
}

/// SNR in dB of the reconstruction available from each scale alone:
/// `10·log10(‖I‖² / ‖I − up(down(I, n), N)‖²)`, `+∞` when the error is zero.
pub fn snr_per_scale(feature: &Tensor, schedule: &ScaleSchedule) -> Result<Vec<f64>> {
    let n = schedule.max_side();
    if feature.shape().len() != 3 || feature.shape()[0] != n {
        bail!(Shape, "feature {:?} does not match schedule side {}", feature.shape(), n);
    }
    let signal = feature.sq_norm();
    if signal == 0.0 {
        bail!(Numeric, "SNR undefined for a zero-norm signal");
    }
    schedule
        .sides()
        .iter()
        .map(|&side| {
            let approx = upsample(&downsample(feature, side)?, n)?;
            let noise = feature.sub(&approx)?.sq_norm();
            Ok(if noise == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (signal / noise).log10()
            })
        })
        .collect()
}
