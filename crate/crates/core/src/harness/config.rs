//! Experiment configuration as UTF-8 `key = value` lines under `[section]`
//! headers. `#` and `;` start comment lines. Every key is listed in
//! [`KEYS`]; anything else is rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{MaskKind, ModelConfig};
use crate::numerics::AdamWConfig;
use crate::sampler::SamplerConfig;
use crate::tokenizer::ScaleSchedule;

/// `(section, key, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("experiment", "seed", "master seed for data, init, dropout and sampling"),
    ("experiment", "out_dir", "artifact directory"),
    ("data", "classes", "number of procedural classes"),
    ("data", "per_class", "procedural training images per class"),
    ("data", "source", "folder of P6 pixmaps with labels.tsv; empty for procedural data"),
    ("tokenizer", "schedule", "comma-separated increasing scale sides"),
    ("tokenizer", "vocab", "codebook size including the reserved zero entry"),
    ("tokenizer", "dim", "latent channels per cell"),
    ("tokenizer", "patch", "pixels per latent cell along each axis"),
    ("model", "depth", "transformer layers"),
    ("model", "heads", "attention heads"),
    ("model", "dim", "model width"),
    ("model", "mlp_ratio", "MLP hidden width over model width"),
    ("model", "mask", "markovian | block_causal | full"),
    ("model", "class_dropout", "probability of replacing the label by the null class"),
    ("train", "steps", "optimizer steps"),
    ("train", "batch_size", "pyramids per step"),
    ("train", "lr", "AdamW learning rate"),
    ("train", "beta1", "AdamW first-moment decay"),
    ("train", "beta2", "AdamW second-moment decay"),
    ("train", "eps", "AdamW denominator offset"),
    ("train", "weight_decay", "decoupled weight decay"),
    ("train", "grad_clip", "global gradient-norm clip"),
    ("sample", "per_class", "samples drawn per class for evaluation"),
    ("sample", "cfg", "guidance weight w"),
    ("sample", "temperature", "softmax temperature"),
    ("sample", "top_k", "keep the k largest logits; 0 keeps all"),
    ("sample", "mr_threshold", "masked-resampling probability threshold"),
    ("sample", "mr_steps", "masked-resampling passes; 0 disables"),
    ("sample", "sr_steps", "simple-resampling draws per scale; 1 disables"),
    ("eval", "cfg_sweep", "guidance weights for the Fréchet sweep"),
    ("eval", "mr_thresholds", "thresholds for the refined-fraction sweep"),
    ("eval", "frechet_side", "area-pooled side of the Fréchet pixel features"),
    ("eval", "sr_source_side", "schedule side the super-resolution probe starts from"),
];

/// Fully resolved experiment settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub classes: usize,
    pub per_class: usize,
    pub source: Option<PathBuf>,
    pub schedule: ScaleSchedule,
    pub vocab: usize,
    pub feat_dim: usize,
    pub patch: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub mask: MaskKind,
    pub class_dropout: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub grad_clip: f64,
    pub samples_per_class: usize,
    pub sampler: SamplerConfig,
    pub cfg_sweep: Vec<f32>,
    pub mr_thresholds: Vec<f64>,
    pub frechet_side: usize,
    pub sr_source_side: usize,
}

impl Default for ExperimentConfig {
    /// Desk preset: four classes, the `{1,2,3,4}` schedule, 2000 steps.
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            classes: 4,
            per_class: 8,
            source: None,
            schedule: ScaleSchedule::desk(),
            vocab: 64,
            feat_dim: 16,
            patch: 4,
            depth: 4,
            heads: 4,
            dim: 64,
            mlp_ratio: 4,
            mask: MaskKind::Markovian,
            class_dropout: 0.1,
            steps: 2000,
            batch_size: 8,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            grad_clip: 1.0,
            samples_per_class: 4,
            sampler: SamplerConfig::default(),
            cfg_sweep: vec![0.0, 1.0, 3.5, 5.0, 7.5],
            mr_thresholds: vec![1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 5e-1],
            frechet_side: 4,
            sr_source_side: 2,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, ()> {
    v.split(',').map(|s| s.trim().parse().map_err(|_| ())).collect()
}

fn fmt_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            heads: self.heads,
            dim: self.dim,
            mlp_ratio: self.mlp_ratio,
            vocab: self.vocab,
            num_classes: self.classes,
            feat_dim: self.feat_dim,
            schedule: self.schedule.clone(),
            class_dropout_prob: self.class_dropout,
            mask: self.mask,
        }
    }

    pub fn image_side(&self) -> usize {
        self.schedule.max_side() * self.patch
    }

    /// Parses on top of the desk defaults. All problems are collected and
    /// reported together as one [`Error::Config`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        let mut section = String::new();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let at = n + 1;
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !KEYS.iter().any(|k| k.0 == section) {
                    errors.push(format!("line {at}: unknown section [{section}]"));
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("line {at}: expected key = value"));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.iter().any(|k| k.0 == section && k.1 == key) {
                errors.push(format!("line {at}: unknown key {key:?} in [{section}]"));
                continue;
            }
            if !seen.insert((section.clone(), key.to_string())) {
                errors.push(format!("line {at}: duplicate key {section}.{key}"));
            }
            if let Err(msg) = cfg.set(&section, key, value) {
                errors.push(format!("line {at}: {section}.{key} = {value:?}: {msg}"));
            }
        }
        errors.extend(cfg.problems());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors.join("\n")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| "not a valid number".to_string())
        }
        let list_err = |_| "not a comma-separated list of numbers".to_string();
        match (section, key) {
            ("experiment", "seed") => self.seed = num(v)?,
            ("experiment", "out_dir") => self.out_dir = PathBuf::from(v),
            ("data", "classes") => self.classes = num(v)?,
            ("data", "per_class") => self.per_class = num(v)?,
            ("data", "source") => self.source = (!v.is_empty()).then(|| PathBuf::from(v)),
            ("tokenizer", "schedule") => self.schedule = v.parse().map_err(|e: Error| e.to_string())?,
            ("tokenizer", "vocab") => self.vocab = num(v)?,
            ("tokenizer", "dim") => self.feat_dim = num(v)?,
            ("tokenizer", "patch") => self.patch = num(v)?,
            ("model", "depth") => self.depth = num(v)?,
            ("model", "heads") => self.heads = num(v)?,
            ("model", "dim") => self.dim = num(v)?,
            ("model", "mlp_ratio") => self.mlp_ratio = num(v)?,
            ("model", "mask") => self.mask = v.parse().map_err(|e: Error| e.to_string())?,
            ("model", "class_dropout") => self.class_dropout = num(v)?,
            ("train", "steps") => self.steps = num(v)?,
            ("train", "batch_size") => self.batch_size = num(v)?,
            ("train", "lr") => self.optimizer.lr = num(v)?,
            ("train", "beta1") => self.optimizer.beta1 = num(v)?,
            ("train", "beta2") => self.optimizer.beta2 = num(v)?,
            ("train", "eps") => self.optimizer.eps = num(v)?,
            ("train", "weight_decay") => self.optimizer.weight_decay = num(v)?,
            ("train", "grad_clip") => self.grad_clip = num(v)?,
            ("sample", "per_class") => self.samples_per_class = num(v)?,
            ("sample", "cfg") => self.sampler.cfg_weight = num(v)?,
            ("sample", "temperature") => self.sampler.temperature = num(v)?,
            ("sample", "top_k") => self.sampler.top_k = Some(num(v)?).filter(|&k: &usize| k > 0),
            ("sample", "mr_threshold") => self.sampler.mr_threshold = num(v)?,
            ("sample", "mr_steps") => self.sampler.mr_steps = num(v)?,
            ("sample", "sr_steps") => self.sampler.sr_steps = num(v)?,
            ("eval", "cfg_sweep") => self.cfg_sweep = parse_list(v).map_err(list_err)?,
            ("eval", "mr_thresholds") => self.mr_thresholds = parse_list(v).map_err(list_err)?,
            ("eval", "frechet_side") => self.frechet_side = num(v)?,
            ("eval", "sr_source_side") => self.sr_source_side = num(v)?,
            _ => unreachable!("key table and setter disagree on {section}.{key}"),
        }
        Ok(())
    }

    /// Cross-field checks, one message per problem.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Err(Error::Config(msg)) = self.model_config().validate() {
            p.extend(msg.split("; ").map(String::from));
        }
        if self.source.is_none() && self.per_class == 0 {
            p.push("data.per_class must be positive for procedural data".into());
        }
        if self.patch == 0 || self.feat_dim > 3 * self.patch * self.patch {
            p.push(format!(
                "tokenizer.dim {} must not exceed the {} values of a {}-pixel RGB patch",
                self.feat_dim,
                3 * self.patch * self.patch,
                self.patch
            ));
        }
        if self.batch_size == 0 {
            p.push("train.batch_size must be positive".into());
        }
        if !(self.optimizer.lr > 0.0) {
            p.push("train.lr must be positive".into());
        }
        for (name, b) in [("beta1", self.optimizer.beta1), ("beta2", self.optimizer.beta2)] {
            if !(0.0..1.0).contains(&b) {
                p.push(format!("train.{name} must lie in [0, 1)"));
            }
        }
        if !(self.grad_clip > 0.0) {
            p.push("train.grad_clip must be positive".into());
        }
        if let Err(Error::Config(msg)) = self.sampler.validate() {
            p.push(msg);
        }
        if self.cfg_sweep.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            p.push("eval.cfg_sweep weights must be finite and ≥ 0".into());
        }
        if self.mr_thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            p.push("eval.mr_thresholds must lie in (0, 1)".into());
        }
        if self.frechet_side == 0 || self.frechet_side > self.image_side() {
            p.push(format!("eval.frechet_side must lie in 1..={}", self.image_side()));
        }
        if self.schedule.position(self.sr_source_side).is_none() || self.sr_source_side == self.schedule.max_side() {
            p.push(format!(
                "eval.sr_source_side {} must be a schedule side below {}",
                self.sr_source_side,
                self.schedule.max_side()
            ));
        }
        p
    }

    /// The configuration as a commented file that parses back to `self`.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for &(sec, key, doc) in KEYS {
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "# {doc}");
            let _ = writeln!(out, "{key} = {}", self.value_of(sec, key));
        }
        out
    }

    fn value_of(&self, section: &str, key: &str) -> String {
        let o = &self.optimizer;
        let s = &self.sampler;
        match (section, key) {
            ("experiment", "seed") => self.seed.to_string(),
            ("experiment", "out_dir") => self.out_dir.display().to_string(),
            ("data", "classes") => self.classes.to_string(),
            ("data", "per_class") => self.per_class.to_string(),
            ("data", "source") => self.source.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ("tokenizer", "schedule") => self.schedule.to_string(),
            ("tokenizer", "vocab") => self.vocab.to_string(),
            ("tokenizer", "dim") => self.feat_dim.to_string(),
            ("tokenizer", "patch") => self.patch.to_string(),
            ("model", "depth") => self.depth.to_string(),
            ("model", "heads") => self.heads.to_string(),
            ("model", "dim") => self.dim.to_string(),
            ("model", "mlp_ratio") => self.mlp_ratio.to_string(),
            ("model", "mask") => self.mask.to_string(),
            ("model", "class_dropout") => self.class_dropout.to_string(),
            ("train", "steps") => self.steps.to_string(),
            ("train", "batch_size") => self.batch_size.to_string(),
            ("train", "lr") => o.lr.to_string(),
            ("train", "beta1") => o.beta1.to_string(),
            ("train", "beta2") => o.beta2.to_string(),
            ("train", "eps") => o.eps.to_string(),
            ("train", "weight_decay") => o.weight_decay.to_string(),
            ("train", "grad_clip") => self.grad_clip.to_string(),
            ("sample", "per_class") => self.samples_per_class.to_string(),
            ("sample", "cfg") => s.cfg_weight.to_string(),
            ("sample", "temperature") => s.temperature.to_string(),
            ("sample", "top_k") => s.top_k.unwrap_or(0).to_string(),
            ("sample", "mr_threshold") => s.mr_threshold.to_string(),
            ("sample", "mr_steps") => s.mr_steps.to_string(),
            ("sample", "sr_steps") => s.sr_steps.to_string(),
            ("eval", "cfg_sweep") => fmt_list(&self.cfg_sweep),
            ("eval", "mr_thresholds") => fmt_list(&self.mr_thresholds),
            ("eval", "frechet_side") => self.frechet_side.to_string(),
            ("eval", "sr_source_side") => self.sr_source_side.to_string(),
            _ => unreachable!("key table and getter disagree on {section}.{key}"),
        }
    }
}
