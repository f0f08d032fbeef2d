use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::resample::{downsample, upsample};
use super::ScaleSchedule;
use crate::error::{bail, Result};
use crate::numerics::Tensor;

/// Frozen `V × d` embedding table shared by every scale.
///
/// Row 0 is always the zero vector. Encoding relies on it to guarantee that
/// residual norms never grow and that multi-scale reconstruction is never
/// worse than single-scale quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    table: Tensor,
}

impl Codebook {
    pub fn new(table: Tensor) -> Result<Self> {
        let (v, d) = table.dims2()?;
        if v < 2 {
            bail!(Validation, "codebook needs at least 2 entries, got {}", v);
        }
        if d == 0 {
            bail!(Validation, "codebook dimension must be positive");
        }
        if !table.is_finite() {
            bail!(Validation, "codebook contains non-finite entries");
        }
        if table.row(0).iter().any(|&x| x != 0.0) {
            bail!(Validation, "codebook row 0 must be the zero vector");
        }
        Ok(Self { table })
    }

    /// Samples `vocab - 1` rows from the continuous residual pyramid of a
    /// corpus (equal share per scale, remainder to the finest), after the
    /// reserved zero row.
    pub fn from_corpus(
        features: &[Tensor],
        schedule: &ScaleSchedule,
        vocab: usize,
        seed: u64,
    ) -> Result<Self> {
        if features.is_empty() {
            bail!(Validation, "cannot build a codebook from an empty corpus");
        }
        if vocab < 2 {
            bail!(Validation, "vocabulary must hold at least 2 entries");
        }
        let d = *features[0].shape().last().unwrap_or(&0);
        let n = schedule.max_side();
        let mut pools: Vec<Vec<Vec<f32>>> = vec![Vec::new(); schedule.len()];
        for f in features {
            if f.shape() != [n, n, d] {
                bail!(Shape, "corpus feature {:?} does not match [{n}, {n}, {d}]", f.shape());
            }
            let mut residual = f.clone();
            for (k, &side) in schedule.sides().iter().enumerate() {
                let coarse = downsample(&residual, side)?;
                for cell in coarse.data().chunks(d) {
                    pools[k].push(cell.to_vec());
                }
                residual = residual.sub(&upsample(&coarse, n)?)?;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let budget = vocab - 1;
        let per_scale = budget / schedule.len();
        let mut rows: Vec<f32> = vec![0.0; d];
        for (k, pool) in pools.iter_mut().enumerate() {
            let want = if k + 1 == schedule.len() {
                budget - per_scale * (schedule.len() - 1)
            } else {
                per_scale
            };
            pool.shuffle(&mut rng);
            for i in 0..want {
                rows.extend_from_slice(&pool[i % pool.len()]);
            }
        }
        Self::new(Tensor::new(&[vocab, d], rows)?)
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn entry(&self, index: usize) -> &[f32] {
        self.table.row(index)
    }

    /// Embeds a token grid of side `side` as a `[side, side, d]` feature.
    pub fn embed(&self, tokens: &[usize], side: usize) -> Result<Tensor> {
        if tokens.len() != side * side {
            bail!(Shape, "{} tokens for a {side}x{side} grid", tokens.len());
        }
        let v = self.vocab_size();
        let mut data = Vec::with_capacity(tokens.len() * self.dim());
        for &t in tokens {
            if t >= v {
                bail!(Index, "token {} outside vocabulary of {}", t, v);
            }
            data.extend_from_slice(self.entry(t));
        }
        Tensor::new(&[side, side, self.dim()], data)
    }

    /// Nearest-entry index under squared L2; ties go to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..self.vocab_size() {
            let dist: f64 = self
                .entry(j)
                .iter()
                .zip(v)
                .map(|(&a, &b)| {
                    let e = a as f64 - b as f64;
                    e * e
                })
                .sum();
            if dist < best_d {
                best_d = dist;
                best = j;
            }
        }
        best
    }

    /// Per-cell nearest-neighbour quantization of a `[n, n, d]` grid.
    pub fn quantize(&self, feature: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        let side = match feature.shape() {
            [h, w, d] if h == w && *d == self.dim() => *h,
            other => bail!(
                Shape,
                "quantize expects [n, n, {}], got {:?}",
                self.dim(),
                other
            ),
        };
        let tokens: Vec<usize> = feature.data().chunks(self.dim()).map(|c| self.nearest(c)).collect();
        let embedded = self.embed(&tokens, side)?;
        Ok((tokens, embedded))
    }
}
