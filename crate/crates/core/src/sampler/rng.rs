use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which draw within a scale a uniform variate feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrawKind {
    Base = 0,
    Simple = 1,
    Masked = 2,
}

/// Counter-based uniform in `[0, 1)`.
///
/// ChaCha8 keyed by `seed`, stream `scale << 40 | kind << 32 | pass`, word
/// position `2 · position`; one `f64` is read from there. Any draw can be
/// recomputed in isolation, so extra resampling passes never shift the
/// variates used by other scales or positions.
pub fn uniform(seed: u64, scale: usize, kind: DrawKind, pass: usize, position: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((scale as u64) << 40) | ((kind as u64) << 32) | pass as u64);
    rng.set_word_pos(2 * position as u128);
    rng.random::<f64>()
}

/// Inverse-CDF draw from a normalized distribution. Falls back to the last
/// index with positive mass when rounding leaves `u` above the total.
pub fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}
