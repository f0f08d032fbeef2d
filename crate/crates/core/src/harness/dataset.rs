use std::f32::consts::TAU;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::image::Image;
use crate::numerics::Tensor;
use crate::tokenizer::Tokenizer;

/// Parametric image family. Class `c` draws from family `c mod 4` with a
/// class-specific palette and geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Gradients,
    Rings,
    Stripes,
    Blobs,
}

impl Family {
    pub fn of_class(class: usize) -> Self {
        [Family::Gradients, Family::Rings, Family::Stripes, Family::Blobs][class % 4]
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::Gradients => "gradients",
            Family::Rings => "rings",
            Family::Stripes => "stripes",
            Family::Blobs => "blobs",
        };
        f.write_str(s)
    }
}

/// Labelled procedural images, all `side × side` RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn families(&self) -> Vec<Family> {
        self.labels.iter().map(|&c| Family::of_class(c)).collect()
    }

    /// Latent features with labels, as consumed by training and distillation.
    pub fn features(&self, tokenizer: &Tokenizer) -> Result<Vec<(Tensor, Option<usize>)>> {
        self.images
            .iter()
            .zip(&self.labels)
            .map(|(img, &c)| Ok((tokenizer.features(img)?, Some(c))))
            .collect()
    }

    /// Writes `NNNNN.ppm` files plus `labels.tsv` (`file<TAB>class`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut index = String::from("file\tclass\n");
        for (i, (img, c)) in self.images.iter().zip(&self.labels).enumerate() {
            let name = format!("{i:05}.ppm");
            img.save(&dir.join(&name))?;
            index.push_str(&format!("{name}\t{c}\n"));
        }
        std::fs::write(dir.join("labels.tsv"), index)?;
        Ok(())
    }

    /// Reads a folder written by [`ToyDataset::save`] or any folder of P6
    /// pixmaps with a `labels.tsv` index; images are area-resized to `side`.
    pub fn load(dir: &Path, side: Option<usize>) -> Result<Self> {
        let index = std::fs::read_to_string(dir.join("labels.tsv"))?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in index.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let (file, class) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("labels.tsv line {} lacks a tab", n + 1)))?;
            let class: usize = class
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("labels.tsv line {} has a bad class", n + 1)))?;
            let mut img = Image::load(&dir.join(file))?;
            if img.channels != 3 {
                bail!(Format, "{file} is not an RGB pixmap");
            }
            if let Some(s) = side.filter(|&s| s != img.width || s != img.height) {
                img = img.resize_area(s)?;
            }
            images.push(img);
            labels.push(class);
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            images,
            labels,
            num_classes,
            seed: 0,
        })
    }
}

fn palette(class: usize) -> ([f32; 3], [f32; 3]) {
    let hue = (class as f32 * 0.618_034).fract();
    let a = hsv(hue, 0.85, 0.95);
    let b = hsv((hue + 0.45).fract(), 0.6, 0.25);
    (a, b)
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let k = |n: f32| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [k(5.0), k(3.0), k(1.0)]
}

fn sample_rng(seed: u64, class: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    rng
}

fn render(class: usize, side: usize, rng: &mut ChaCha8Rng) -> Image {
    let (ca, cb) = palette(class);
    let geo = class / 4;
    let mut jitter = |amp: f32| rng.random_range(-amp..amp);
    let mix: Box<dyn Fn(f32, f32) -> f32> = match Family::of_class(class) {
        Family::Gradients => {
            let angle = geo as f32 * 0.9 + jitter(0.15);
            let (dx, dy) = (angle.cos(), angle.sin());
            let shift = jitter(0.1);
            Box::new(move |x, y| ((x - 0.5) * dx + (y - 0.5) * dy + 0.5 + shift).clamp(0.0, 1.0))
        }
        Family::Rings => {
            let (cx, cy) = (0.5 + jitter(0.08), 0.5 + jitter(0.08));
            let freq = 1.5 + 0.5 * geo as f32;
            let phase = jitter(0.4);
            Box::new(move |x, y| {
                let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                0.5 + 0.5 * (TAU * freq * r + phase).cos()
            })
        }
        Family::Stripes => {
            let angle = 0.4 + geo as f32 * 0.7 + jitter(0.1);
            let freq = 2.0 + geo as f32 * 0.5;
            let phase = jitter(0.5);
            let (dx, dy) = (angle.cos(), angle.sin());
            Box::new(move |x, y| 0.5 + 0.5 * (TAU * freq * (x * dx + y * dy) + phase).sin())
        }
        Family::Blobs => {
            let centers: Vec<(f32, f32)> = (0..3)
                .map(|_| (0.5 + jitter(0.3), 0.5 + jitter(0.3)))
                .collect();
            let width = 0.05 + 0.02 * geo as f32;
            Box::new(move |x, y| {
                let s: f32 = centers
                    .iter()
                    .map(|(cx, cy)| (-((x - cx).powi(2) + (y - cy).powi(2)) / width).exp())
                    .sum();
                s.min(1.0)
            })
        }
    };
    let mut data = Vec::with_capacity(side * side * 3);
    for i in 0..side {
        for j in 0..side {
            let t = mix((j as f32 + 0.5) / side as f32, (i as f32 + 0.5) / side as f32);
            for c in 0..3 {
                data.push(t * ca[c] + (1.0 - t) * cb[c]);
            }
        }
    }
    Image {
        width: side,
        height: side,
        channels: 3,
        data,
    }
}

/// `per_class` images for each of `num_classes` classes, ordered by class.
/// Sample `i` of class `c` depends only on `(seed, c, i)`.
pub fn make_toy_dataset(num_classes: usize, per_class: usize, side: usize, seed: u64) -> Result<ToyDataset> {
    if side == 0 {
        bail!(Config, "image side must be positive");
    }
    let mut images = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        for i in 0..per_class {
            images.push(render(c, side, &mut sample_rng(seed, c, i)));
            labels.push(c);
        }
    }
    Ok(ToyDataset {
        images,
        labels,
        num_classes,
        seed,
    })
}

/// Band-limited colour fields: each channel is a constant plus four random
/// low-frequency cosines with amplitude falling as `1/f²`.
pub fn smooth_corpus(count: usize, side: usize, seed: u64) -> Vec<Image> {
    (0..count)
        .map(|i| {
            let mut rng = sample_rng(seed, usize::MAX >> 32, i);
            let waves: Vec<[f32; 4]> = (0..3 * 4)
                .map(|_| {
                    let fx = rng.random_range(0..3) as f32;
                    let fy = rng.random_range(0..3) as f32;
                    let f2 = (fx * fx + fy * fy).max(1.0);
                    [fx, fy, rng.random_range(0.0..TAU), 0.25 / f2]
                })
                .collect();
            let base: Vec<f32> = (0..3).map(|_| rng.random_range(0.3..0.7)).collect();
            let mut data = Vec::with_capacity(side * side * 3);
            for y in 0..side {
                for x in 0..side {
                    let (u, v) = ((x as f32 + 0.5) / side as f32, (y as f32 + 0.5) / side as f32);
                    for c in 0..3 {
                        let s: f32 = waves[c * 4..(c + 1) * 4]
                            .iter()
                            .map(|w| w[3] * (TAU * 0.5 * (w[0] * u + w[1] * v) + w[2]).cos())
                            .sum();
                        data.push((base[c] + s).clamp(0.0, 1.0));
                    }
                }
            }
            Image {
                width: side,
                height: side,
                channels: 3,
                data,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_empty() {
        let a = make_toy_dataset(4, 3, 8, 7).unwrap();
        let b = make_toy_dataset(4, 3, 8, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_toy_dataset(4, 3, 8, 8).unwrap());
        assert!(make_toy_dataset(4, 0, 8, 7).unwrap().is_empty());
    }

    #[test]
    fn values_in_unit_range() {
        let d = make_toy_dataset(8, 2, 8, 1).unwrap();
        assert!(d.images.iter().all(|i| i.data.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(d.families()[5], Family::Stripes);
        let s = smooth_corpus(3, 8, 2);
        assert!(s.iter().all(|i| i.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
