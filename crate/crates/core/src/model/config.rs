use std::collections::BTreeMap;

use super::MaskKind;
use crate::error::{bail, Error, Result};
use crate::tokenizer::ScaleSchedule;

/// Transformer hyperparameters. Class labels run over `0..num_classes`;
/// index `num_classes` is the null class used for guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub num_classes: usize,
    pub feat_dim: usize,
    pub schedule: ScaleSchedule,
    pub class_dropout_prob: f32,
    pub mask: MaskKind,
}

impl ModelConfig {
    /// CPU-sized configuration that overfits small corpora in minutes.
    pub fn desk(num_classes: usize, feat_dim: usize) -> Self {
        Self {
            depth: 4,
            heads: 4,
            dim: 64,
            mlp_ratio: 4,
            vocab: 64,
            num_classes,
            feat_dim,
            schedule: ScaleSchedule::desk(),
            class_dropout_prob: 0.1,
            mask: MaskKind::Markovian,
        }
    }

    /// Depth-16 VAR-sized network over the ten-scale schedule.
    pub fn large() -> Self {
        Self {
            depth: 16,
            heads: 16,
            dim: 1024,
            mlp_ratio: 4,
            vocab: 6000,
            num_classes: 100,
            feat_dim: 32,
            schedule: ScaleSchedule::full_16(),
            class_dropout_prob: 0.1,
            mask: MaskKind::Markovian,
        }
    }

    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.depth == 0 {
            problems.push("depth must be positive".to_string());
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            problems.push(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.mlp_ratio == 0 {
            problems.push("mlp_ratio must be positive".to_string());
        }
        if self.vocab < 2 {
            problems.push(format!("vocab {} too small", self.vocab));
        }
        if self.feat_dim == 0 {
            problems.push("feat_dim must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.class_dropout_prob) {
            problems.push(format!("class_dropout_prob {} outside [0,1)", self.class_dropout_prob));
        }
        if self.schedule.is_empty() {
            problems.push("empty schedule".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Scalar parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let h = self.mlp_ratio * d;
        let embeddings = (self.num_classes + 1) * d + self.feat_dim * d + d;
        let per_side: usize = self.schedule.sides().iter().map(|s| s * s * d + d).sum();
        let per_layer = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
        let head = 2 * d + d * self.vocab + self.vocab;
        embeddings + per_side + self.depth * per_layer + head
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let sides: Vec<String> = self.schedule.sides().iter().map(|s| s.to_string()).collect();
        vec![
            ("depth".into(), self.depth.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("dim".into(), self.dim.to_string()),
            ("mlp_ratio".into(), self.mlp_ratio.to_string()),
            ("vocab".into(), self.vocab.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("feat_dim".into(), self.feat_dim.to_string()),
            ("schedule".into(), sides.join(",")),
            ("class_dropout_prob".into(), self.class_dropout_prob.to_string()),
            ("mask".into(), self.mask.to_string()),
        ]
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
            kv.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("model config lacks {key}")))
        }
        fn num<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = get(kv, key)?;
            raw.parse()
                .map_err(|_| Error::Format(format!("model config {key}={raw:?} is not a number")))
        }
        let cfg = Self {
            depth: num(kv, "depth")?,
            heads: num(kv, "heads")?,
            dim: num(kv, "dim")?,
            mlp_ratio: num(kv, "mlp_ratio")?,
            vocab: num(kv, "vocab")?,
            num_classes: num(kv, "num_classes")?,
            feat_dim: num(kv, "feat_dim")?,
            schedule: get(kv, "schedule")?.parse()?,
            class_dropout_prob: num(kv, "class_dropout_prob")?,
            mask: get(kv, "mask")?.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same network restricted to a sub-schedule.
    pub fn with_schedule(&self, schedule: ScaleSchedule) -> Result<Self> {
        if let Some(s) = schedule.sides().iter().find(|s| self.schedule.position(**s).is_none()) {
            bail!(Validation, "side {} is not part of the model schedule", s);
        }
        Ok(Self {
            schedule,
            ..self.clone()
        })
    }
}
