use super::generate::{run, Known};
use super::SamplerConfig;
use crate::error::{bail, Result};
use crate::image::Image;
use crate::model::ScaleModel;
use crate::tokenizer::{encode, Tokenizer, TokenPyramid};

/// Pixel-resolution known/unknown grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditMask {
    pub width: usize,
    pub height: usize,
    pub known: Vec<bool>,
}

impl EditMask {
    pub fn new(width: usize, height: usize, known: Vec<bool>) -> Result<Self> {
        if known.len() != width * height || width == 0 || height == 0 {
            bail!(Validation, "{}x{} mask given {} cells", width, height, known.len());
        }
        Ok(Self { width, height, known })
    }

    pub fn filled(side: usize, known: bool) -> Self {
        Self {
            width: side,
            height: side,
            known: vec![known; side * side],
        }
    }

    /// Single-channel image; values of at least one half count as known.
    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels != 1 {
            bail!(Validation, "edit masks are single-channel, got {} channels", img.channels);
        }
        Self::new(img.width, img.height, img.data.iter().map(|&v| v >= 0.5).collect())
    }

    pub fn to_image(&self) -> Image {
        let data = self.known.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// `side × side` grid in which a cell is known only if every pixel its
    /// area touches is known.
    pub fn project(&self, side: usize) -> Vec<bool> {
        let span = |i: usize, len: usize| (i * len / side, ((i + 1) * len).div_ceil(side));
        let mut out = Vec::with_capacity(side * side);
        for i in 0..side {
            let (y0, y1) = span(i, self.height);
            for j in 0..side {
                let (x0, x1) = span(j, self.width);
                out.push((y0..y1).all(|y| (x0..x1).all(|x| self.known[y * self.width + x])));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EditTask {
    Inpaint(EditMask),
    Outpaint(EditMask),
    /// Fix every scale up to `source_side` and generate the rest.
    SuperRes { source_side: usize },
}

/// Generates a pyramid in which every known token equals the encoder's token
/// for `source`. Known tokens are written after each scale is drawn and
/// before it enters the running latent.
pub fn edit(
    model: &dyn ScaleModel,
    tokenizer: &Tokenizer,
    source: &Image,
    task: &EditTask,
    class: usize,
    cfg: &SamplerConfig,
) -> Result<TokenPyramid> {
    let schedule = model.schedule();
    let full = schedule.max_side() * tokenizer.embedder.patch();
    let (image, mask): (Image, Vec<Vec<bool>>) = match task {
        EditTask::Inpaint(m) | EditTask::Outpaint(m) => {
            if source.width != full || source.height != full {
                bail!(Validation, "source is {}x{}, expected {}x{}", source.width, source.height, full, full);
            }
            if m.width != source.width || m.height != source.height {
                bail!(Validation, "mask is {}x{} but source is {}x{}", m.width, m.height, source.width, source.height);
            }
            let mask = schedule.sides().iter().map(|&s| m.project(s)).collect();
            (source.clone(), mask)
        }
        EditTask::SuperRes { source_side } => {
            if schedule.position(*source_side).is_none() {
                bail!(Validation, "super-resolution source side {} is not in schedule {}", source_side, schedule);
            }
            let low = source_side * tokenizer.embedder.patch();
            let image = if source.width == full && source.height == full {
                source.clone()
            } else if source.width == low && source.height == low {
                source.resize_area(full)?
            } else {
                bail!(Validation, "super-resolution source must be {low}x{low} or {full}x{full}, got {}x{}", source.width, source.height);
            };
            let mask = schedule
                .sides()
                .iter()
                .map(|&s| vec![s <= *source_side; s * s])
                .collect();
            (image, mask)
        }
    };
    let truth = encode(&tokenizer.features(&image)?, schedule, &tokenizer.codebook)?;
    let known = Known { mask, truth: &truth };
    Ok(run(model, &tokenizer.codebook, class, cfg, Some(&known))?.pyramid)
}
