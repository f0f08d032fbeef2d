//! Scale-wise sampling with guidance, resampling and zero-shot editing.
//!
//! Generation walks the schedule coarse to fine. Scale `k` is predicted from
//! the accumulated reconstruction of scales `< k` pooled to its side, its
//! tokens are drawn jointly, and their upsampled embeddings are added to the
//! running latent. Random variates come from [`rng::uniform`], addressed by
//! `(scale, draw kind, pass, position)`.

mod edit;
mod generate;
pub mod rng;

pub use edit::{edit, EditMask, EditTask};
pub use generate::{
    generate, generate_with_trace, masked_resample, scale_probs, simple_resample, GenerationTrace,
};

use crate::error::{bail, Result};
use crate::numerics::Tensor;

/// Sampling knobs. `mr_steps = 0` disables masked resampling and
/// `sr_steps = 1` disables simple resampling.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub cfg_weight: f32,
    pub temperature: f32,
    pub top_k: Option<usize>,
    pub mr_threshold: f64,
    pub mr_steps: usize,
    pub sr_steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            cfg_weight: 5.0,
            temperature: 1.0,
            top_k: None,
            mr_threshold: 0.01,
            mr_steps: 5,
            sr_steps: 1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Plain ancestral sampling: no guidance, no resampling.
    pub fn plain(seed: u64) -> Self {
        Self {
            cfg_weight: 0.0,
            mr_steps: 0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cfg_weight >= 0.0) || !self.cfg_weight.is_finite() {
            bail!(Config, "cfg weight must be finite and ≥ 0, got {}", self.cfg_weight);
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            bail!(Config, "temperature must be finite and > 0, got {}", self.temperature);
        }
        if self.top_k == Some(0) {
            bail!(Config, "top_k must be at least 1");
        }
        if !(self.mr_threshold > 0.0 && self.mr_threshold < 1.0) {
            bail!(Config, "mr threshold must lie in (0, 1), got {}", self.mr_threshold);
        }
        if self.sr_steps == 0 {
            bail!(Config, "sr_steps must be at least 1");
        }
        Ok(())
    }
}

/// `(1 + w)·cond − w·uncond`, the log of `p_c^{1+w} / p_u^w` up to a
/// per-row constant. Evaluated as `cond + w·(cond − uncond)` so equal inputs
/// return `cond` exactly.
pub fn guided_logits(cond: &Tensor, uncond: &Tensor, w: f32) -> Result<Tensor> {
    if cond.shape() != uncond.shape() {
        bail!(Shape, "guidance needs equal shapes, got {:?} and {:?}", cond.shape(), uncond.shape());
    }
    if w == 0.0 {
        return Ok(cond.clone());
    }
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(&c, &u)| c + w * (c - u))
        .collect();
    Tensor::new(cond.shape(), data)
}

/// Row-wise sampling distribution after temperature and top-k, in f64.
/// Top-k keeps the `k` largest logits, ties broken toward lower indices.
pub fn sampling_probs(logits: &Tensor, temperature: f32, top_k: Option<usize>) -> Result<Vec<Vec<f64>>> {
    let (n, v) = logits.dims2()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = logits.row(i).iter().map(|&x| x as f64 / temperature as f64).collect();
        let mut keep = vec![true; v];
        if let Some(k) = top_k.filter(|&k| k < v) {
            let mut order: Vec<usize> = (0..v).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            keep = vec![false; v];
            for &j in &order[..k] {
                keep[j] = true;
            }
        }
        let max = row
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&x, _)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            bail!(Numeric, "row {} has no finite logits", i);
        }
        let mut p: Vec<f64> = row
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { (x - max).exp() } else { 0.0 })
            .collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guidance_identities() {
        let c = Tensor::new(&[1, 3], vec![0.1, -2.0, 1.5]).unwrap();
        let u = Tensor::new(&[1, 3], vec![0.4, 0.3, -1.0]).unwrap();
        assert_eq!(guided_logits(&c, &u, 0.0).unwrap(), c);
        assert_eq!(guided_logits(&c, &c, 3.5).unwrap(), c);
        let bad = Tensor::zeros(&[2, 3]);
        assert!(guided_logits(&c, &bad, 1.0).is_err());
    }

    #[test]
    fn top_one_is_argmax() {
        let l = Tensor::new(&[2, 3], vec![0.0, 2.0, 1.0, 5.0, 5.0, 1.0]).unwrap();
        let p = sampling_probs(&l, 1.0, Some(1)).unwrap();
        assert_eq!(p[0], vec![0.0, 1.0, 0.0]);
        assert_eq!(p[1], vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn config_bounds() {
        assert!(SamplerConfig::default().validate().is_ok());
        for bad in [
            SamplerConfig { temperature: 0.0, ..Default::default() },
            SamplerConfig { cfg_weight: -1.0, ..Default::default() },
            SamplerConfig { mr_threshold: 1.0, ..Default::default() },
            SamplerConfig { sr_steps: 0, ..Default::default() },
            SamplerConfig { top_k: Some(0), ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(crate::Error::Config(_))));
        }
    }
}
