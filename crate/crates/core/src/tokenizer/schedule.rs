use std::fmt;
use std::str::FromStr;

use crate::error::{bail, Error, Result};

/// Strictly increasing list of grid sides; the last entry is the full latent side.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ScaleSchedule {
    sides: Vec<usize>,
}

impl ScaleSchedule {
    pub fn new(sides: Vec<usize>) -> Result<Self> {
        if sides.is_empty() {
            bail!(Config, "scale schedule is empty");
        }
        if sides[0] == 0 {
            bail!(Config, "scale sides must be positive");
        }
        if let Some(w) = sides.windows(2).find(|w| w[0] >= w[1]) {
            bail!(Config, "scale schedule must be strictly increasing ({} then {})", w[0], w[1]);
        }
        if sides.iter().any(|&s| s > u16::MAX as usize) {
            bail!(Config, "scale side exceeds u16 range");
        }
        Ok(Self { sides })
    }

    /// `{1,2,3,4}`, small enough to train on one core in minutes.
    pub fn desk() -> Self {
        Self { sides: vec![1, 2, 3, 4] }
    }

    /// The ten-scale 16-max schedule of the 256px setting.
    pub fn full_16() -> Self {
        Self {
            sides: vec![1, 2, 3, 4, 5, 6, 8, 10, 13, 16],
        }
    }

    pub fn sides(&self) -> &[usize] {
        &self.sides
    }

    pub fn len(&self) -> usize {
        self.sides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sides.is_empty()
    }

    /// Full latent side `N`.
    pub fn max_side(&self) -> usize {
        *self.sides.last().expect("non-empty")
    }

    pub fn side(&self, k: usize) -> usize {
        self.sides[k]
    }

    pub fn position(&self, side: usize) -> Option<usize> {
        self.sides.iter().position(|&s| s == side)
    }

    /// Tokens in scale `k`.
    pub fn block_len(&self, k: usize) -> usize {
        self.sides[k] * self.sides[k]
    }

    pub fn block_lens(&self) -> Vec<usize> {
        self.sides.iter().map(|s| s * s).collect()
    }

    /// Total sequence length `Σ side²`.
    pub fn token_count(&self) -> usize {
        self.sides.iter().map(|s| s * s).sum()
    }

    /// Offset of each scale block in the flattened sequence.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.sides
            .iter()
            .map(|s| {
                let o = acc;
                acc += s * s;
                o
            })
            .collect()
    }
}

impl fmt::Display for ScaleSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.sides.iter().map(|s| s.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for ScaleSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let sides = s
            .split([',', '-'])
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad scale side {p:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sides)
    }
}
