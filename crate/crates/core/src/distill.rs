//! Scale-schedule pruning and student fine-tuning.
//!
//! A student keeps a subset of the teacher's sides and the teacher's
//! weights for them. Each kept scale is conditioned on the accumulated
//! latent pooled to its own side, whatever the previous side was.

use std::fmt;

use crate::error::{bail, Result};
use crate::model::{attention_pairs, fit, kv_retention, Checkpoint, MaskKind, TrainExample, Trainer};
use crate::numerics::{AdamWConfig, Tensor};
use crate::tokenizer::{encode, ScaleSchedule};

/// Teacher schedule and the pruned student schedule it is fine-tuned to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneSpec {
    pub teacher: ScaleSchedule,
    pub student: ScaleSchedule,
    /// Set when the two largest teacher sides were not both kept.
    pub top_two_override: bool,
}

impl PruneSpec {
    pub fn is_identity(&self) -> bool {
        self.teacher == self.student
    }
}

/// Builds a spec keeping `keep` out of `teacher`. Without `allow_override`
/// the two largest teacher sides must be kept; the full side is always
/// required.
pub fn prune_schedule(teacher: &ScaleSchedule, keep: &[usize], allow_override: bool) -> Result<PruneSpec> {
    let student = ScaleSchedule::new(keep.to_vec())?;
    if let Some(s) = keep.iter().find(|&&s| teacher.position(s).is_none()) {
        bail!(Validation, "side {} is not in teacher schedule {}", s, teacher);
    }
    if student.max_side() != teacher.max_side() {
        bail!(Validation, "student must end at the full side {}", teacher.max_side());
    }
    let sides = teacher.sides();
    let top_two = &sides[sides.len().saturating_sub(2)..];
    let keeps_top_two = top_two.iter().all(|s| student.position(*s).is_some());
    if !keeps_top_two && !allow_override {
        bail!(
            Validation,
            "student {} drops one of the two largest teacher sides {:?}",
            student,
            top_two
        );
    }
    Ok(PruneSpec {
        teacher: teacher.clone(),
        student,
        top_two_override: !keeps_top_two,
    })
}

/// Named student schedules over the ten-scale 16-max teacher, with whether
/// each needs the top-two override.
pub const PRESETS: &[(&str, &[usize], bool)] = &[
    ("six_scale", &[1, 3, 5, 8, 13, 16], false),
    ("five_scale", &[1, 5, 8, 13, 16], false),
    ("x3_step", &[1, 5, 13, 16], false),
    ("early_heavy", &[1, 2, 3, 4, 5, 8, 16], true),
    ("random_sparse", &[1, 4, 8, 16], true),
];

pub fn preset(name: &str) -> Result<PruneSpec> {
    let Some(&(_, keep, over)) = PRESETS.iter().find(|(n, _, _)| *n == name) else {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
        bail!(Config, "unknown preset {name:?}; known: {}", names.join(", "));
    };
    prune_schedule(&ScaleSchedule::full_16(), keep, over)
}

/// Teacher and student totals with their ratios (student / teacher).
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub mask: MaskKind,
    pub tokens: (u64, u64),
    pub attention_pairs: (u64, u64),
    pub passes: (u64, u64),
    pub kv_retention: (u64, u64),
}

fn ratio((t, s): (u64, u64)) -> f64 {
    s as f64 / t as f64
}

impl CostReport {
    pub fn token_count_ratio(&self) -> f64 {
        ratio(self.tokens)
    }

    pub fn attention_pair_ratio(&self) -> f64 {
        ratio(self.attention_pairs)
    }

    pub fn pass_count_ratio(&self) -> f64 {
        ratio(self.passes)
    }

    pub fn kv_retention_ratio(&self) -> f64 {
        ratio(self.kv_retention)
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric\tteacher\tstudent\tratio")?;
        for (name, pair) in [
            ("tokens", self.tokens),
            ("attention_pairs", self.attention_pairs),
            ("decoder_passes", self.passes),
            ("kv_retention", self.kv_retention),
        ] {
            writeln!(f, "{name}\t{}\t{}\t{:.6}", pair.0, pair.1, ratio(pair))?;
        }
        write!(f, "mask\t{}", self.mask)
    }
}

/// Exact analytic costs of a spec under one attention mask.
pub fn cost_report(spec: &PruneSpec, mask: MaskKind) -> CostReport {
    let both = |f: &dyn Fn(&ScaleSchedule) -> u64| (f(&spec.teacher), f(&spec.student));
    CostReport {
        mask,
        tokens: both(&|s| s.token_count() as u64),
        attention_pairs: both(&|s| attention_pairs(mask, s)),
        passes: both(&|s| s.len() as u64),
        kv_retention: both(&|s| kv_retention(mask, s)),
    }
}

/// Block-causal versus Markovian attention on one schedule, reported as
/// `(block_causal, markovian)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskComparison {
    pub attention_pairs: (u64, u64),
    pub kv_retention: (u64, u64),
}

impl MaskComparison {
    pub fn new(schedule: &ScaleSchedule) -> Self {
        Self {
            attention_pairs: (
                attention_pairs(MaskKind::BlockCausal, schedule),
                attention_pairs(MaskKind::Markovian, schedule),
            ),
            kv_retention: (
                kv_retention(MaskKind::BlockCausal, schedule),
                kv_retention(MaskKind::Markovian, schedule),
            ),
        }
    }

    /// Block-causal cost over Markovian cost.
    pub fn attention_reduction(&self) -> f64 {
        self.attention_pairs.0 as f64 / self.attention_pairs.1 as f64
    }

    pub fn kv_reduction(&self) -> f64 {
        self.kv_retention.0 as f64 / self.kv_retention.1 as f64
    }
}

/// Fine-tuning budget for [`finetune_student`].
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

/// Restricts the teacher to the student sides, re-encodes `corpus` (latent
/// features with optional labels) under the student schedule with the
/// teacher's frozen codebook, and trains with the teacher's objective.
pub fn finetune_student(
    teacher: &Checkpoint,
    spec: &PruneSpec,
    corpus: &[(Tensor, Option<usize>)],
    cfg: &FinetuneConfig,
) -> Result<Checkpoint> {
    if teacher.model.config().schedule != spec.teacher {
        bail!(
            Validation,
            "checkpoint schedule {} differs from spec teacher {}",
            teacher.model.config().schedule,
            spec.teacher
        );
    }
    let mut model = teacher.model.restricted(spec.student.clone())?;
    let mut tokenizer = teacher.tokenizer.clone();
    tokenizer.schedule = spec.student.clone();
    let mut trainer = Trainer::new(cfg.optimizer, &model, cfg.seed);
    if cfg.steps > 0 {
        let examples = corpus
            .iter()
            .map(|(feat, label)| {
                let mut p = encode(feat, &spec.student, &tokenizer.codebook)?;
                p.class_label = *label;
                TrainExample::new(&p, &tokenizer.codebook)
            })
            .collect::<Result<Vec<_>>>()?;
        fit(&mut model, &examples, &mut trainer, cfg.steps, cfg.batch_size, |_, _| {})?;
    }
    let mut student = Checkpoint::new(model, tokenizer, cfg.seed);
    student.trainer = Some(trainer);
    student.meta = teacher.meta.clone();
    student.meta.insert("prune.teacher".into(), spec.teacher.to_string());
    student.meta.insert("prune.student".into(), spec.student.to_string());
    student.meta.insert("prune.override".into(), spec.top_two_override.to_string());
    student.meta.insert("distill.steps".into(), cfg.steps.to_string());
    Ok(student)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_spec_has_unit_ratios() {
        let t = ScaleSchedule::full_16();
        let spec = prune_schedule(&t, t.sides(), false).unwrap();
        assert!(spec.is_identity());
        let r = cost_report(&spec, MaskKind::Markovian);
        for x in [r.token_count_ratio(), r.attention_pair_ratio(), r.pass_count_ratio(), r.kv_retention_ratio()] {
            assert_eq!(x, 1.0);
        }
    }

    #[test]
    fn top_two_rule() {
        let t = ScaleSchedule::full_16();
        assert!(prune_schedule(&t, &[1, 3, 5, 8, 13, 16], false).is_ok());
        assert!(prune_schedule(&t, &[1, 5, 8, 13, 16], false).is_ok());
        let e = prune_schedule(&t, &[1, 2, 3, 4, 5, 8, 16], false);
        assert!(matches!(e, Err(crate::Error::Validation(_))));
        let over = prune_schedule(&t, &[1, 2, 3, 4, 5, 8, 16], true).unwrap();
        assert!(over.top_two_override);
        assert!(prune_schedule(&t, &[1, 7, 13, 16], false).is_err());
        assert!(prune_schedule(&t, &[1, 13], true).is_err());
    }

    #[test]
    fn every_preset_builds() {
        for (name, keep, over) in PRESETS {
            let spec = preset(name).unwrap();
            assert_eq!(spec.student.sides(), *keep);
            assert_eq!(spec.top_two_override, *over);
        }
        assert!(preset("none").is_err());
    }

    #[test]
    fn ten_to_six_passes() {
        let spec = preset("six_scale").unwrap();
        let r = cost_report(&spec, MaskKind::Markovian);
        assert_eq!(r.passes, (10, 6));
        assert_eq!(r.pass_count_ratio(), 0.6);
    }
}
