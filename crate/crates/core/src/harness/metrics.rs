use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{bail, Result};
use crate::image::Image;

const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Ridge added to both covariances before the matrix square root.
pub const FRECHET_EPS: f64 = 1e-6;

/// Scalar summary of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub snr_per_scale: Vec<f64>,
    pub token_accuracy: f64,
    pub nats_per_token: f64,
    pub codebook_entropy: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub frechet: f64,
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        bail!(
            Shape,
            "images differ in shape: {}x{}x{} vs {}x{}x{}",
            a.width,
            a.height,
            a.channels,
            b.width,
            b.height,
            b.channels
        );
    }
    if a.data.is_empty() {
        bail!(Validation, "metric of an empty image");
    }
    Ok(())
}

/// `10·log10(1 / MSE)` for pixels in `[0, 1]`; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean SSIM over every `8×8` window (clipped to the image) and channel,
/// with uniform weights, population moments, `C1 = 0.01²`, `C2 = 0.03²`.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let wy = SSIM_WINDOW.min(a.height);
    let wx = SSIM_WINDOW.min(a.width);
    let n = (wx * wy) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        for y0 in 0..=a.height - wy {
            for x0 in 0..=a.width - wx {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wy {
                    for x in x0..x0 + wx {
                        let p = a.get(y, x, c) as f64;
                        let q = b.get(y, x, c) as f64;
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Area-pooled `side × side` pixels, flattened, as a Fréchet feature.
pub fn pixel_features(img: &Image, side: usize) -> Result<Vec<f64>> {
    Ok(img.resize_area(side)?.data.iter().map(|&v| v as f64).collect())
}

fn gaussian_fit(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if set.len() < 2 {
        bail!(Validation, "Fréchet distance needs at least 2 samples per set, got {}", set.len());
    }
    let d = set[0].len();
    if d == 0 || set.iter().any(|v| v.len() != d) {
        bail!(Shape, "feature vectors must share a positive length");
    }
    let n = set.len() as f64;
    let mean = DVector::from_fn(d, |i, _| set.iter().map(|v| v[i]).sum::<f64>() / n);
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let x = DVector::from_column_slice(v) - &mean;
        cov += &x * x.transpose();
    }
    cov /= n - 1.0;
    Ok((mean, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^{1/2})` between Gaussian fits, with
/// [`FRECHET_EPS`] added to each covariance diagonal. The trace of the cross
/// term is evaluated as `tr((√Σa Σb √Σa)^{1/2})`. Clamped at zero.
pub fn toy_frechet(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = gaussian_fit(set_a)?;
    let (mb, cb) = gaussian_fit(set_b)?;
    if ma.len() != mb.len() {
        bail!(Shape, "feature sets differ in dimension: {} vs {}", ma.len(), mb.len());
    }
    let ridge = DMatrix::<f64>::identity(ma.len(), ma.len()) * FRECHET_EPS;
    let ca = ca + &ridge;
    let cb = cb + &ridge;
    let ra = sqrt_psd(&ca);
    let cross = sqrt_psd(&(&ra * &cb * &ra)).trace();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Entropy in nats of the empirical token distribution.
pub fn usage_entropy(tokens: impl IntoIterator<Item = usize>, vocab: usize) -> f64 {
    let mut hist = vec![0u64; vocab];
    let mut n = 0u64;
    for t in tokens {
        hist[t.min(vocab - 1)] += 1;
        n += 1;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}
