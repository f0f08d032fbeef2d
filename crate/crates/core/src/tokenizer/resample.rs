//! Deterministic resampling of `[side × side × d]` feature grids: area
//! averaging downwards, half-pixel bilinear interpolation upwards.

use crate::error::{bail, Result};
use crate::numerics::Tensor;

/// Sparse 1-D resampling weights: `out[i] = Σ w · in[j]`.
type Weights1d = Vec<Vec<(usize, f64)>>;

fn grid_dims(feature: &Tensor) -> Result<(usize, usize)> {
    match feature.shape() {
        [h, w, d] if h == w => Ok((*h, *d)),
        other => bail!(Shape, "expected a square [n, n, d] grid, got {:?}", other),
    }
}

/// Overlap-weighted box filter from `src` cells to `dst` cells (`dst ≤ src`).
fn area_weights(src: usize, dst: usize) -> Weights1d {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * ratio;
            let hi = (i + 1) as f64 * ratio;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|j| {
                    let overlap = (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, overlap / ratio))
                })
                .collect()
        })
        .collect()
}

/// Half-pixel-centred linear interpolation weights with edge clamping.
fn bilinear_weights(src: usize, dst: usize) -> Weights1d {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let j0 = pos.floor() as usize;
            let j1 = (j0 + 1).min(src - 1);
            let frac = pos - j0 as f64;
            if frac == 0.0 || j0 == j1 {
                vec![(j0, 1.0)]
            } else {
                vec![(j0, 1.0 - frac), (j1, frac)]
            }
        })
        .collect()
}

fn apply_separable(feature: &Tensor, weights: &Weights1d) -> Result<Tensor> {
    let (src, d) = grid_dims(feature)?;
    let dst = weights.len();
    let x = feature.data();
    // rows first, then columns
    let mut tmp = vec![0.0f64; dst * src * d];
    for (i, wi) in weights.iter().enumerate() {
        for &(r, w) in wi {
            for c in 0..src {
                for ch in 0..d {
                    tmp[(i * src + c) * d + ch] += w * x[(r * src + c) * d + ch] as f64;
                }
            }
        }
    }
    let mut out = vec![0.0f32; dst * dst * d];
    for i in 0..dst {
        for (j, wj) in weights.iter().enumerate() {
            for ch in 0..d {
                let v: f64 = wj.iter().map(|&(c, w)| w * tmp[(i * src + c) * d + ch]).sum();
                out[(i * dst + j) * d + ch] = v as f32;
            }
        }
    }
    Tensor::new(&[dst, dst, d], out)
}

/// Area-average pooling from side `N` to side `n`. `n == N` is the identity.
pub fn downsample(feature: &Tensor, n: usize) -> Result<Tensor> {
    let (side, _) = grid_dims(feature)?;
    if n == 0 || n > side {
        bail!(Range, "downsample target {} outside [1, {}]", n, side);
    }
    if n == side {
        return Ok(feature.clone());
    }
    apply_separable(feature, &area_weights(side, n))
}

/// Bilinear interpolation from side `n` to side `m ≥ n`. `m == n` is the identity.
pub fn upsample(feature: &Tensor, m: usize) -> Result<Tensor> {
    let (side, _) = grid_dims(feature)?;
    if m < side {
        bail!(Range, "upsample target {} below source side {}", m, side);
    }
    if m == side {
        return Ok(feature.clone());
    }
    apply_separable(feature, &bilinear_weights(side, m))
}
