use crate::error::{bail, Result};

/// A sequence whose last `t` positions hold the `MASK` id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingState {
    pub sequence: Vec<usize>,
    pub t: usize,
    /// Id used for `MASK`; one past the vocabulary.
    pub mask_id: usize,
}

impl MaskingState {
    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.sequence[i] == self.mask_id
    }
}

/// Absorbing forward process that masks one token per step from the end.
pub fn masking_forward(x0: &[usize], t: usize, vocab: usize) -> Result<MaskingState> {
    let n = x0.len();
    if t > n {
        bail!(Range, "t = {} outside 0..={}", t, n);
    }
    if let Some(&bad) = x0.iter().find(|&&x| x >= vocab) {
        bail!(Index, "token {} outside vocabulary of {}", bad, vocab);
    }
    let sequence = x0
        .iter()
        .enumerate()
        .map(|(i, &x)| if i < n - t { x } else { vocab })
        .collect();
    Ok(MaskingState {
        sequence,
        t,
        mask_id: vocab,
    })
}

/// Per-position KL between the reverse-step posterior
/// `q(x_{t-1} | x_t, x_0)` and a model that copies unmasked tokens, keeps
/// later masks, and predicts `model_probs[i]` at the single position
/// `i = T - t` that the step reveals.
///
/// The posterior is a point mass, so every position but `i` contributes 0
/// and position `i` contributes `-log model_probs[i][x0[i]]`.
pub fn kl_decomposition(x0: &[usize], xt: &MaskingState, model_probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = x0.len();
    if xt.len() != n || model_probs.len() != n {
        bail!(Shape, "x0, x_t and model_probs must share length {}", n);
    }
    if xt.t == 0 || xt.t > n {
        bail!(Range, "reverse step needs 1 ≤ t ≤ {}, got {}", n, xt.t);
    }
    let vocab = xt.mask_id;
    for i in 0..n {
        let expect_mask = i >= n - xt.t;
        if expect_mask != xt.is_masked(i) || (!expect_mask && xt.sequence[i] != x0[i]) {
            bail!(Contract, "x_t disagrees with x0 at position {}", i);
        }
        if model_probs[i].len() != vocab {
            bail!(Shape, "position {} has {} probabilities for vocabulary {}", i, model_probs[i].len(), vocab);
        }
    }
    let revealed = n - xt.t;
    let mut kl = vec![0.0; n];
    kl[revealed] = -model_probs[revealed][x0[revealed]].ln();
    Ok(kl)
}
