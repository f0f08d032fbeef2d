use super::{ParamStore, Tensor};
use crate::error::{bail, Result};

/// AdamW hyperparameters.
///
/// Defaults are `betas = (0.9, 0.95)`, `weight_decay = 0.05`, `lr = 1e-4`.
/// [`AdamWConfig::literal_betas`] gives `betas = (0.95, 0.05)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn literal_betas() -> Self {
        Self {
            beta1: 0.95,
            beta2: 0.05,
            ..Self::default()
        }
    }
}

/// Moment buffers for every parameter of one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let moments: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step_count: 0,
            first_moment: moments.clone(),
            second_moment: moments,
        }
    }

    /// One decoupled-weight-decay Adam update over every parameter.
    ///
    /// Every parameter must carry a gradient; a parameter never reached by the
    /// backward pass is a contract error rather than a silent skip.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.first_moment.len() != params.len() {
            bail!(
                Contract,
                "optimizer tracks {} tensors, store has {}",
                self.first_moment.len(),
                params.len()
            );
        }
        if let Some(id) = params.ids().find(|&id| params.get(id).grad().is_none()) {
            bail!(Contract, "parameter {} has no gradient", params.name(id));
        }
        self.step_count += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id);
            let g = p.grad().expect("checked above").to_vec();
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            let w = p.data_mut();
            for j in 0..w.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= lr * weight_decay * w[j];
                w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
