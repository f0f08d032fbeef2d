use std::collections::BTreeMap;
use std::path::Path;

use super::{ModelConfig, Trainer, Transformer};
use crate::error::{bail, Error, Result};
use crate::container;
use crate::numerics::{AdamWConfig, OptimizerState, ParamStore, Tensor};
use crate::tokenizer::Tokenizer;

const MAGIC: &[u8; 8] = b"SRDDCKPT";

/// Model, frozen tokenizer, optional optimizer state and free-form metadata.
///
/// The config block holds `model.*`, `tok.*`, `adam.*`, `train.*` and
/// `meta.*` entries; tensors are `param.*`, `tok.codebook`, `tok.proj` and
/// `adam.m.*` / `adam.v.*` moments.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Transformer,
    pub tokenizer: Tokenizer,
    pub trainer: Option<Trainer>,
    pub seed: u64,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Transformer, tokenizer: Tokenizer, seed: u64) -> Self {
        Self {
            model,
            tokenizer,
            trainer: None,
            seed,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut kv: Vec<(String, String)> = self
            .model
            .config()
            .to_kv()
            .into_iter()
            .map(|(k, v)| (format!("model.{k}"), v))
            .collect();
        kv.push(("seed".into(), self.seed.to_string()));
        kv.extend(self.tokenizer.header());
        let mut tensors: Vec<(String, &Tensor)> = self.tokenizer.tensors();
        tensors.extend(self.model.params().iter().map(|(n, t)| (format!("param.{n}"), t)));
        if let Some(tr) = &self.trainer {
            let o = &tr.optimizer;
            kv.push(("adam.lr".into(), o.config.lr.to_string()));
            kv.push(("adam.beta1".into(), o.config.beta1.to_string()));
            kv.push(("adam.beta2".into(), o.config.beta2.to_string()));
            kv.push(("adam.eps".into(), o.config.eps.to_string()));
            kv.push(("adam.weight_decay".into(), o.config.weight_decay.to_string()));
            kv.push(("adam.step".into(), o.step_count.to_string()));
            kv.push(("train.seed".into(), tr.seed.to_string()));
            kv.push(("train.grad_clip".into(), tr.grad_clip.to_string()));
            for ((name, _), (m, v)) in self
                .model
                .params()
                .iter()
                .zip(o.first_moment.iter().zip(&o.second_moment))
            {
                tensors.push((format!("adam.m.{name}"), m));
                tensors.push((format!("adam.v.{name}"), v));
            }
        }
        kv.extend(self.meta.iter().map(|(k, v)| (format!("meta.{k}"), v.clone())));
        container::encode(MAGIC, &kv, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = container::decode(MAGIC, bytes)?;
        let config = ModelConfig::from_kv(&c.section("model"))?;
        let seed = c.num("seed")?;
        let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut params = ParamStore::new();
        for (name, t) in &c.tensors {
            if let Some(p) = name.strip_prefix("param.") {
                params.insert(p, t.clone())?;
            } else {
                by_name.insert(name.clone(), t.clone());
            }
        }
        let tokenizer = Tokenizer::from_parts(&c, &mut by_name)?;
        let model = Transformer::from_params(config, params)?;
        let mut take = |n: &str| {
            by_name
                .remove(n)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {n}")))
        };
        let trainer = if c.kv.contains_key("adam.step") {
            let cfg = AdamWConfig {
                lr: c.num("adam.lr")?,
                beta1: c.num("adam.beta1")?,
                beta2: c.num("adam.beta2")?,
                eps: c.num("adam.eps")?,
                weight_decay: c.num("adam.weight_decay")?,
            };
            let mut optimizer = OptimizerState::new(cfg, model.params());
            optimizer.step_count = c.num("adam.step")?;
            for (k, (name, _)) in model.params().iter().enumerate() {
                optimizer.first_moment[k] = take(&format!("adam.m.{name}"))?;
                optimizer.second_moment[k] = take(&format!("adam.v.{name}"))?;
            }
            Some(Trainer {
                optimizer,
                seed: c.num("train.seed")?,
                grad_clip: c.num("train.grad_clip")?,
            })
        } else {
            None
        };
        if let Some(extra) = by_name.keys().next() {
            bail!(Format, "unexpected tensor {extra} in checkpoint");
        }
        Ok(Self {
            model,
            tokenizer,
            trainer,
            seed,
            meta: c.section("meta"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{Codebook, PatchEmbedder, ScaleSchedule};

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            depth: 1,
            heads: 2,
            dim: 8,
            vocab: 4,
            feat_dim: 3,
            schedule: ScaleSchedule::new(vec![1, 2]).unwrap(),
            ..ModelConfig::desk(2, 3)
        };
        let model = Transformer::new(cfg, 11).unwrap();
        let table = Tensor::new(&[4, 3], (0..12).map(|i| if i < 3 { 0.0 } else { i as f32 }).collect()).unwrap();
        let tokenizer = Tokenizer {
            schedule: ScaleSchedule::new(vec![1, 2]).unwrap(),
            codebook: Codebook::new(table).unwrap(),
            embedder: PatchEmbedder::new(1, 3, 5).unwrap(),
        };
        let mut ck = Checkpoint::new(model, tokenizer, 42);
        ck.meta.insert("note".into(), "a b c".into());
        ck
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let mut ck = sample();
        ck.trainer = Some(Trainer::new(AdamWConfig::default(), &ck.model, 9));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model, ck.model);
        assert_eq!(back.tokenizer, ck.tokenizer);
        assert_eq!(back.seed, 42);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.trainer.as_ref().unwrap().optimizer, ck.trainer.as_ref().unwrap().optimizer);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(b"SRDDCKP").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }
}
