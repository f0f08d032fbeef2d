#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srdd::model::{MaskKind, ModelConfig, Transformer};
use srdd::numerics::{ParamStore, Tensor};
use srdd::tokenizer::{Codebook, ScaleSchedule, TokenPyramid};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config(schedule: &[usize], vocab: usize, mask: MaskKind) -> ModelConfig {
    ModelConfig {
        depth: 2,
        heads: 2,
        dim: 16,
        mlp_ratio: 2,
        vocab,
        num_classes: 3,
        feat_dim: 4,
        schedule: ScaleSchedule::new(schedule.to_vec()).unwrap(),
        class_dropout_prob: 0.0,
        mask,
    }
}

/// Fresh model with every parameter perturbed by `N(0, std²)` so that
/// logits depend visibly on all inputs.
pub fn noisy_model(config: ModelConfig, std: f32, rng: &mut ChaCha8Rng) -> Transformer {
    let mut model = Transformer::new(config, rng.random()).unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let t = model.params_mut().get_mut(id);
        let noise = Tensor::randn(t.shape(), std, rng);
        t.add_assign(&noise).unwrap();
    }
    model
}

pub fn random_codebook(vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Codebook {
    let mut table = Tensor::randn(&[vocab, dim], 0.5, rng);
    table.data_mut()[..dim].fill(0.0);
    Codebook::new(table).unwrap()
}

pub fn random_pyramid(schedule: &ScaleSchedule, vocab: usize, class: Option<usize>, rng: &mut ChaCha8Rng) -> TokenPyramid {
    let tokens = schedule
        .sides()
        .iter()
        .map(|s| (0..s * s).map(|_| rng.random_range(0..vocab)).collect())
        .collect();
    TokenPyramid::new(schedule.clone(), tokens, class).unwrap()
}

/// `-log softmax(row)[target]` in f64.
pub fn nll(row: &[f32], target: usize) -> f64 {
    let max = row.iter().map(|&x| x as f64).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
    (z.ln() + max) - row[target] as f64
}

pub fn softmax64(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Worst norm-wise relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between the
/// analytic gradient in `store` and central differences of `loss` with
/// step `eps`, over every parameter tensor. Tensors whose analytic and
/// numeric gradients both vanish count as exact.
pub fn fd_audit(store: &mut ParamStore, eps: f32, loss: impl Fn(&ParamStore) -> f32) -> (f64, String) {
    let ids: Vec<_> = store.ids().collect();
    let mut worst = (0.0, String::new());
    for id in ids {
        let analytic: Vec<f64> = store.get(id).grad().expect("gradient").iter().map(|&g| g as f64).collect();
        let n = store.get(id).numel();
        let mut numeric = vec![0.0f64; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let up = loss(store) as f64;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let down = loss(store) as f64;
            store.get_mut(id).data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * eps as f64);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-12 { 0.0 } else { diff / scale };
        if rel >= worst.0 {
            worst = (rel, store.name(id).to_string());
        }
    }
    worst
}
