use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{bail, Error, Result};
use crate::tokenizer::ScaleSchedule;

/// Which scale blocks a query block may attend to. Attention inside a
/// block is always bidirectional.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    /// Block `s` sees blocks `s' ≤ s`.
    BlockCausal,
    /// Block `s` sees only itself; its inputs already carry scale `s-1`.
    Markovian,
    /// Every position sees every position.
    Full,
}

impl MaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskKind::BlockCausal => "block_causal",
            MaskKind::Markovian => "markovian",
            MaskKind::Full => "full",
        }
    }

    fn block_allows(&self, q_block: usize, k_block: usize) -> bool {
        match self {
            MaskKind::BlockCausal => k_block <= q_block,
            MaskKind::Markovian => k_block == q_block,
            MaskKind::Full => true,
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block_causal" | "block-causal" | "var" => Ok(MaskKind::BlockCausal),
            "markovian" | "markov" | "sdd" => Ok(MaskKind::Markovian),
            "full" => Ok(MaskKind::Full),
            other => bail!(Config, "unknown mask kind {other:?}"),
        }
    }
}

/// Declarative mask over a schedule's flattened multi-scale layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMaskSpec {
    pub kind: MaskKind,
    pub schedule: ScaleSchedule,
}

impl AttentionMaskSpec {
    pub fn new(kind: MaskKind, schedule: ScaleSchedule) -> Self {
        Self { kind, schedule }
    }

    pub fn build(&self) -> AttentionMask {
        AttentionMask::for_blocks(self.kind, &self.schedule.block_lens())
    }
}

/// Materialized boolean `L × L` mask, shared by all heads and layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Arc<[bool]>,
    block_of: Vec<usize>,
}

impl AttentionMask {
    /// Mask over consecutive blocks with the given lengths.
    pub fn for_blocks(kind: MaskKind, block_lens: &[usize]) -> Self {
        let block_of: Vec<usize> = block_lens
            .iter()
            .enumerate()
            .flat_map(|(b, &n)| std::iter::repeat_n(b, n))
            .collect();
        let len = block_of.len();
        let mut allowed = vec![false; len * len];
        for q in 0..len {
            for k in 0..len {
                allowed[q * len + k] = kind.block_allows(block_of[q], block_of[k]);
            }
        }
        Self {
            len,
            allowed: allowed.into(),
            block_of,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.len + k]
    }

    pub fn block_of(&self, pos: usize) -> usize {
        self.block_of[pos]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn raw(&self) -> Arc<[bool]> {
        Arc::clone(&self.allowed)
    }

    /// Returns a copy with every pair for which `forbid(q, k)` holds removed.
    pub fn restricted(&self, forbid: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = self.allowed.to_vec();
        for q in 0..self.len {
            for k in 0..self.len {
                if forbid(q, k) {
                    allowed[q * self.len + k] = false;
                }
            }
        }
        Self {
            len: self.len,
            allowed: allowed.into(),
            block_of: self.block_of.clone(),
        }
    }
}

/// Closed-form count of allowed query/key pairs.
pub fn attention_pairs(kind: MaskKind, schedule: &ScaleSchedule) -> u64 {
    let b: Vec<u64> = schedule.block_lens().iter().map(|&n| n as u64).collect();
    match kind {
        MaskKind::Markovian => b.iter().map(|x| x * x).sum(),
        MaskKind::BlockCausal => {
            let mut prefix = 0;
            b.iter()
                .map(|&x| {
                    prefix += x;
                    x * prefix
                })
                .sum()
        }
        MaskKind::Full => {
            let l: u64 = b.iter().sum();
            l * l
        }
    }
}

/// Peak number of key/value positions that must stay cached while
/// generating scale by scale: the whole prefix for block-causal attention,
/// only the current block for Markovian attention.
pub fn kv_retention(kind: MaskKind, schedule: &ScaleSchedule) -> u64 {
    let b = schedule.block_lens();
    match kind {
        MaskKind::Markovian => b.iter().copied().max().unwrap_or(0) as u64,
        MaskKind::BlockCausal | MaskKind::Full => b.iter().sum::<usize>() as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_scale_is_one_true_entry() {
        let s = ScaleSchedule::new(vec![1]).unwrap();
        for kind in [MaskKind::BlockCausal, MaskKind::Markovian, MaskKind::Full] {
            let m = AttentionMaskSpec::new(kind, s.clone()).build();
            assert_eq!(m.len(), 1);
            assert!(m.allowed(0, 0));
        }
    }

    #[test]
    fn two_scale_patterns() {
        let s = ScaleSchedule::new(vec![1, 2]).unwrap();
        let bc = AttentionMaskSpec::new(MaskKind::BlockCausal, s.clone()).build();
        let mk = AttentionMaskSpec::new(MaskKind::Markovian, s).build();
        // row 0 (scale 1) sees only itself under both
        assert!(bc.allowed(0, 0) && (1..5).all(|k| !bc.allowed(0, k)));
        assert!(mk.allowed(0, 0) && (1..5).all(|k| !mk.allowed(0, k)));
        // block (2,1) is fully true for block-causal, false for markovian
        assert!((1..5).all(|q| bc.allowed(q, 0)));
        assert!((1..5).all(|q| !mk.allowed(q, 0)));
        assert!((1..5).all(|q| (1..5).all(|k| bc.allowed(q, k) && mk.allowed(q, k))));
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("markovian".parse::<MaskKind>().unwrap(), MaskKind::Markovian);
        assert_eq!("block_causal".parse::<MaskKind>().unwrap(), MaskKind::BlockCausal);
        assert!("diagonal".parse::<MaskKind>().is_err());
    }
}
