//! Planar-free interleaved float images with binary PNM (P5/P6) I/O.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{bail, Result};

/// Interleaved image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            bail!(Shape, "{}x{}x{} image given {} values", width, height, channels, data.len());
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Area-average resize of a square image to `side × side`.
    pub fn resize_area(&self, side: usize) -> Result<Self> {
        if self.width != self.height {
            bail!(Shape, "area resize expects a square image, got {}x{}", self.width, self.height);
        }
        let t = crate::numerics::Tensor::new(&[self.height, self.width, self.channels], self.data.clone())?;
        let out = if side <= self.width {
            crate::tokenizer::downsample(&t, side)?
        } else {
            crate::tokenizer::upsample(&t, side)?
        };
        Self::new(side, side, self.channels, out.into_data())
    }

    pub fn write_pnm<W: Write>(&self, mut w: W) -> Result<()> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => bail!(Format, "PNM supports 1 or 3 channels, not {}", c),
        };
        write!(w, "{}\n{} {}\n255\n", magic, self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_pnm<R: BufRead>(mut r: R) -> Result<Self> {
        let magic = next_token(&mut r)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => bail!(Format, "unsupported PNM magic {:?}", other),
        };
        let width = parse_dim(&next_token(&mut r)?)?;
        let height = parse_dim(&next_token(&mut r)?)?;
        let maxval = parse_dim(&next_token(&mut r)?)?;
        if maxval == 0 || maxval > 255 {
            bail!(Format, "only 8-bit PNM is supported (maxval {})", maxval);
        }
        let mut bytes = vec![0u8; width * height * channels];
        r.read_exact(&mut bytes)?;
        let data = bytes.iter().map(|&b| b as f32 / maxval as f32).collect();
        Self::new(width, height, channels, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_pnm(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_pnm(std::io::BufReader::new(f))
    }
}

fn parse_dim(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| crate::Error::Format(format!("bad PNM header field {s:?}")))
}

/// Reads one whitespace-delimited header token, skipping `#` comments, and
/// consumes exactly one trailing whitespace byte.
fn next_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut line = Vec::new();
            r.read_until(b'\n', &mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c as char);
    }
}
