//! Multi-scale residual tokenizer over pixel-space latents.
//!
//! Images are lifted patch-wise into `[N, N, d]` latents by a frozen
//! orthogonal map, then encoded coarse-to-fine: each scale quantizes the
//! area-pooled residual against one shared codebook and subtracts the
//! bilinearly upsampled embedding. Decoding sums the upsampled embeddings.

mod codebook;
mod patch;
mod pyramid;
mod resample;
mod schedule;

pub use codebook::Codebook;
pub use patch::PatchEmbedder;
pub use pyramid::{
    decode, encode, encode_with_trace, scale_inputs, snr_per_scale, EncodeTrace, FeatureAccumulator,
    TokenPyramid,
};
pub use resample::{downsample, upsample};
pub use schedule::ScaleSchedule;

use std::collections::BTreeMap;
use std::path::Path;

use crate::container::{self, Contents};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"SRDTOKEN";

/// Schedule, codebook and patch lift bundled for image-level use.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub schedule: ScaleSchedule,
    pub codebook: Codebook,
    pub embedder: PatchEmbedder,
}

impl Tokenizer {
    /// Builds the patch lift and samples a codebook from `images`.
    pub fn fit(
        images: &[Image],
        schedule: ScaleSchedule,
        vocab: usize,
        dim: usize,
        patch: usize,
        seed: u64,
    ) -> Result<Self> {
        let embedder = PatchEmbedder::new(patch, dim, seed)?;
        let feats = images
            .iter()
            .map(|img| embedder.features(img))
            .collect::<Result<Vec<_>>>()?;
        let codebook = Codebook::from_corpus(&feats, &schedule, vocab, seed.wrapping_add(1))?;
        Ok(Self {
            schedule,
            codebook,
            embedder,
        })
    }

    pub fn image_side(&self) -> usize {
        self.schedule.max_side() * self.embedder.patch()
    }

    pub fn features(&self, img: &Image) -> Result<Tensor> {
        self.embedder.features(img)
    }

    pub fn encode_image(&self, img: &Image) -> Result<TokenPyramid> {
        encode(&self.features(img)?, &self.schedule, &self.codebook)
    }

    pub fn decode_image(&self, pyramid: &TokenPyramid) -> Result<Image> {
        Ok(self.embedder.image(&decode(pyramid, &self.codebook)?)?.clamped())
    }
}

impl Tokenizer {
    pub(crate) fn header(&self) -> Vec<(String, String)> {
        vec![
            ("tok.schedule".into(), self.schedule.to_string()),
            ("tok.patch".into(), self.embedder.patch().to_string()),
        ]
    }

    pub(crate) fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("tok.codebook".into(), self.codebook.table()),
            ("tok.proj".into(), self.embedder.projection()),
        ]
    }

    /// Rebuilds from a parsed container, removing the tensors it consumes.
    pub(crate) fn from_parts(c: &Contents, tensors: &mut BTreeMap<String, Tensor>) -> Result<Self> {
        let mut take = |n: &str| {
            tensors
                .remove(n)
                .ok_or_else(|| Error::Format(format!("file lacks tensor {n}")))
        };
        Ok(Self {
            schedule: c.get("tok.schedule")?.parse()?,
            codebook: Codebook::new(take("tok.codebook")?)?,
            embedder: PatchEmbedder::from_projection(c.num("tok.patch")?, take("tok.proj")?)?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::encode(MAGIC, &self.header(), &self.tensors())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode(MAGIC, bytes)?;
        let mut tensors: BTreeMap<String, Tensor> = c.tensors.iter().cloned().collect();
        let tok = Self::from_parts(&c, &mut tensors)?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra} in tokenizer file")));
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
