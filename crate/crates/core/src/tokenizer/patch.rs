use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::image::Image;
use crate::numerics::Tensor;

/// Fixed random orthogonal lift of `patch × patch` RGB patches (centred on
/// mid-grey) into `dim`-dimensional latent cells.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedder {
    patch: usize,
    /// `[dim, 3·patch²]`; orthonormal columns when `dim ≥ 3·patch²`,
    /// orthonormal rows otherwise.
    proj: Tensor,
}

impl PatchEmbedder {
    pub fn new(patch: usize, dim: usize, seed: u64) -> Result<Self> {
        if patch == 0 || dim == 0 {
            bail!(Config, "patch size and feature dim must be positive");
        }
        let k = 3 * patch * patch;
        let (rows, cols) = (dim.max(k), dim.min(k));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Tensor::randn(&[rows, cols], 1.0, &mut rng);
        let m = DMatrix::from_row_slice(rows, cols, &g.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
        let q = m.qr().q();
        let mut proj = vec![0.0f32; dim * k];
        for i in 0..dim {
            for j in 0..k {
                proj[i * k + j] = if dim >= k { q[(i, j)] } else { q[(j, i)] } as f32;
            }
        }
        Self::from_projection(patch, Tensor::new(&[dim, k], proj)?)
    }

    pub fn from_projection(patch: usize, proj: Tensor) -> Result<Self> {
        let (_, k) = proj.dims2()?;
        if k != 3 * patch * patch {
            bail!(Shape, "projection width {} does not match patch {}", k, patch);
        }
        Ok(Self { patch, proj })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn dim(&self) -> usize {
        self.proj.shape()[0]
    }

    pub fn projection(&self) -> &Tensor {
        &self.proj
    }

    /// `[N, N, dim]` latent for an RGB image of side `N · patch`.
    pub fn features(&self, img: &Image) -> Result<Tensor> {
        let p = self.patch;
        if img.channels != 3 || img.width != img.height || img.width % p != 0 {
            bail!(
                Shape,
                "expected a square RGB image with side divisible by {}, got {}x{}x{}",
                p,
                img.width,
                img.height,
                img.channels
            );
        }
        let n = img.width / p;
        let (dim, k) = (self.dim(), 3 * p * p);
        let w = self.proj.data();
        let mut out = vec![0.0f32; n * n * dim];
        let mut patch = vec![0.0f32; k];
        for cy in 0..n {
            for cx in 0..n {
                let mut idx = 0;
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..3 {
                            patch[idx] = img.get(cy * p + py, cx * p + px, c) - 0.5;
                            idx += 1;
                        }
                    }
                }
                let cell = &mut out[(cy * n + cx) * dim..(cy * n + cx + 1) * dim];
                for (i, o) in cell.iter_mut().enumerate() {
                    *o = w[i * k..(i + 1) * k].iter().zip(&patch).map(|(a, b)| a * b).sum();
                }
            }
        }
        Tensor::new(&[n, n, dim], out)
    }

    /// Inverse lift through the projection transpose.
    pub fn image(&self, feature: &Tensor) -> Result<Image> {
        let (n, dim) = match feature.shape() {
            [h, w, d] if h == w && *d == self.dim() => (*h, *d),
            other => bail!(Shape, "expected [n, n, {}], got {:?}", self.dim(), other),
        };
        let p = self.patch;
        let k = 3 * p * p;
        let w = self.proj.data();
        let mut img = Image::filled(n * p, n * p, 3, 0.0);
        for cy in 0..n {
            for cx in 0..n {
                let cell = &feature.data()[(cy * n + cx) * dim..(cy * n + cx + 1) * dim];
                let mut idx = 0;
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..3 {
                            let v: f32 = (0..dim).map(|i| w[i * k + idx] * cell[i]).sum();
                            img.set(cy * p + py, cx * p + px, c, v + 0.5);
                            idx += 1;
                        }
                    }
                }
            }
        }
        Ok(img)
    }
}
