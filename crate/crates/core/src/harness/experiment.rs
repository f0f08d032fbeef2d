use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::dataset::{make_toy_dataset, ToyDataset};
use super::metrics::{pixel_features, psnr, ssim, toy_frechet, usage_entropy, MetricsReport};
use crate::diffusion::var_loss;
use crate::error::{bail, Result};
use crate::image::Image;
use crate::model::{fit, AttentionMask, Checkpoint, ScaleModel, TrainExample, Trainer, Transformer};
use crate::sampler::{edit, generate, masked_resample, EditTask, SamplerConfig};
use crate::tokenizer::{snr_per_scale, TokenPyramid, Tokenizer};

/// Seeds of the independent random streams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub data: u64,
    pub tokenizer: u64,
    pub init: u64,
    pub dropout: u64,
    pub sampling: u64,
}

impl RunSeeds {
    pub fn from_master(seed: u64) -> Self {
        Self {
            data: seed,
            tokenizer: seed.wrapping_add(1),
            init: seed.wrapping_add(2),
            dropout: seed.wrapping_add(3),
            sampling: seed.wrapping_add(4),
        }
    }

    /// Sampler seed of evaluation sample `index`.
    pub fn sample(&self, index: usize) -> u64 {
        self.sampling.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
    }
}

/// Everything a run produces, before any of it is written to disk.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub report: MetricsReport,
    pub loss_curve: Vec<f32>,
    /// Per image: per-scale SNR in dB.
    pub snr: Vec<Vec<f64>>,
    /// `(w, Fréchet distance)`.
    pub cfg_sweep: Vec<(f32, f64)>,
    /// `(threshold, first-pass refined fraction)`.
    pub mr_sweep: Vec<(f64, f64)>,
    pub checkpoint: Checkpoint,
}

#[derive(Serialize)]
struct Summary<'a> {
    seed: u64,
    steps: usize,
    mask: String,
    schedule: String,
    final_loss: Option<f32>,
    metrics: &'a MetricsReport,
    cfg_sweep: &'a [(f32, f64)],
    mr_sweep: &'a [(f64, f64)],
}

/// Procedural data, or the configured pixmap folder resized to the image side.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<ToyDataset> {
    let seeds = RunSeeds::from_master(cfg.seed);
    let data = match &cfg.source {
        Some(dir) => ToyDataset::load(dir, Some(cfg.image_side()))?,
        None => make_toy_dataset(cfg.classes, cfg.per_class, cfg.image_side(), seeds.data)?,
    };
    if data.is_empty() {
        bail!(Validation, "dataset is empty");
    }
    if let Some(&bad) = data.labels.iter().find(|&&c| c >= cfg.classes) {
        bail!(Validation, "label {} outside the {} configured classes", bad, cfg.classes);
    }
    Ok(data)
}

pub fn fit_tokenizer(cfg: &ExperimentConfig, data: &ToyDataset) -> Result<Tokenizer> {
    let seeds = RunSeeds::from_master(cfg.seed);
    Tokenizer::fit(&data.images, cfg.schedule.clone(), cfg.vocab, cfg.feat_dim, cfg.patch, seeds.tokenizer)
}

/// Labelled pyramids of `data` under the tokenizer's schedule.
pub fn encode_dataset(tokenizer: &Tokenizer, data: &ToyDataset) -> Result<Vec<TokenPyramid>> {
    data.images
        .iter()
        .zip(&data.labels)
        .map(|(img, &c)| {
            let mut p = tokenizer.encode_image(img)?;
            p.class_label = Some(c);
            Ok(p)
        })
        .collect()
}

/// Fresh model trained for `cfg.steps`; returns the model, optimizer state
/// and per-step loss.
pub fn train_model(
    cfg: &ExperimentConfig,
    tokenizer: &Tokenizer,
    pyramids: &[TokenPyramid],
    on_step: impl FnMut(usize, f32),
) -> Result<(Transformer, Trainer, Vec<f32>)> {
    let seeds = RunSeeds::from_master(cfg.seed);
    let mut model = Transformer::new(cfg.model_config(), seeds.init)?;
    let mut trainer = Trainer::new(cfg.optimizer, &model, seeds.dropout);
    trainer.grad_clip = cfg.grad_clip;
    let examples = pyramids
        .iter()
        .map(|p| TrainExample::new(p, &tokenizer.codebook))
        .collect::<Result<Vec<_>>>()?;
    let curve = fit(&mut model, &examples, &mut trainer, cfg.steps, cfg.batch_size, on_step)?;
    Ok((model, trainer, curve))
}

/// Share of teacher-forced argmax predictions equal to the target token.
pub fn token_accuracy(model: &dyn ScaleModel, tokenizer: &Tokenizer, pyramids: &[TokenPyramid]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for p in pyramids {
        let ex = TrainExample::new(p, &tokenizer.codebook)?;
        let mask = AttentionMask::for_blocks(model.mask_kind(), &ex.block_lens());
        let logits = model.logits(&ex.blocks, p.class_label.unwrap_or(model.null_class()), &mask)?;
        for (i, &t) in ex.targets.iter().enumerate() {
            let row = logits.row(i);
            let arg = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            hit += usize::from(arg == t);
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Mean first-pass refined fraction over every scale of every context,
/// token-weighted, for each threshold.
pub fn mr_sweep(
    model: &dyn ScaleModel,
    tokenizer: &Tokenizer,
    contexts: &[TokenPyramid],
    base: &SamplerConfig,
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    thresholds
        .iter()
        .map(|&threshold| {
            let cfg = SamplerConfig {
                mr_threshold: threshold,
                mr_steps: 1,
                ..base.clone()
            };
            let (mut flagged, mut total) = (0.0, 0usize);
            for p in contexts {
                let class = p.class_label.unwrap_or(model.null_class());
                for k in 0..p.schedule.len() {
                    let (_, fractions) = masked_resample(model, &tokenizer.codebook, p, k, class, &cfg)?;
                    let n = p.schedule.block_len(k);
                    flagged += fractions[0] * n as f64;
                    total += n;
                }
            }
            Ok((threshold, flagged / total as f64))
        })
        .collect()
}

fn sample_images(
    cfg: &ExperimentConfig,
    ckpt: &Checkpoint,
    sampler: &SamplerConfig,
) -> Result<Vec<Image>> {
    let seeds = RunSeeds::from_master(cfg.seed);
    let mut out = Vec::new();
    for c in 0..cfg.classes {
        for i in 0..cfg.samples_per_class {
            let s = SamplerConfig {
                seed: seeds.sample(c * cfg.samples_per_class + i),
                ..sampler.clone()
            };
            let p = generate(&ckpt.model, &ckpt.tokenizer.codebook, c, &s)?;
            out.push(ckpt.tokenizer.decode_image(&p)?);
        }
    }
    Ok(out)
}

fn frechet_to(reference: &[Vec<f64>], images: &[Image], side: usize) -> Result<f64> {
    let feats = images
        .iter()
        .map(|img| pixel_features(img, side))
        .collect::<Result<Vec<_>>>()?;
    toy_frechet(reference, &feats)
}

/// Metrics and sweeps of a trained checkpoint against `data`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    ckpt: &Checkpoint,
    data: &ToyDataset,
) -> Result<(MetricsReport, Vec<Vec<f64>>, Vec<(f32, f64)>, Vec<(f64, f64)>)> {
    let tok = &ckpt.tokenizer;
    let model = &ckpt.model;
    let pyramids = encode_dataset(tok, data)?;

    let snr = data
        .images
        .iter()
        .map(|img| snr_per_scale(&tok.features(img)?, &tok.schedule))
        .collect::<Result<Vec<_>>>()?;
    let scales = tok.schedule.len();
    let snr_mean = (0..scales)
        .map(|k| snr.iter().map(|s| s[k]).sum::<f64>() / snr.len() as f64)
        .collect();

    let nats = pyramids
        .iter()
        .map(|p| var_loss(model, p, &tok.codebook))
        .sum::<Result<f64>>()?
        / pyramids.len() as f64;
    let accuracy = token_accuracy(model, tok, &pyramids)?;
    let entropy = usage_entropy(pyramids.iter().flat_map(|p| p.flat()), tok.codebook.vocab_size());

    let seeds = RunSeeds::from_master(cfg.seed);
    let low = cfg.sr_source_side * cfg.patch;
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for (i, (img, &c)) in data.images.iter().zip(&data.labels).enumerate() {
        let s = SamplerConfig {
            seed: seeds.sample(usize::MAX - i),
            ..cfg.sampler.clone()
        };
        let task = EditTask::SuperRes {
            source_side: cfg.sr_source_side,
        };
        let p = edit(model, tok, &img.resize_area(low)?, &task, c, &s)?;
        let out = tok.decode_image(&p)?;
        psnr_sum += psnr(img, &out)?;
        ssim_sum += ssim(img, &out)?;
    }

    let reference = data
        .images
        .iter()
        .map(|img| pixel_features(img, cfg.frechet_side))
        .collect::<Result<Vec<_>>>()?;
    let frechet = frechet_to(&reference, &sample_images(cfg, ckpt, &cfg.sampler)?, cfg.frechet_side)?;
    let cfg_sweep = cfg
        .cfg_sweep
        .iter()
        .map(|&w| {
            let s = SamplerConfig {
                cfg_weight: w,
                ..cfg.sampler.clone()
            };
            Ok((w, frechet_to(&reference, &sample_images(cfg, ckpt, &s)?, cfg.frechet_side)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mr = mr_sweep(model, tok, &pyramids, &cfg.sampler, &cfg.mr_thresholds)?;

    let n = data.len() as f64;
    let report = MetricsReport {
        snr_per_scale: snr_mean,
        token_accuracy: accuracy,
        nats_per_token: nats,
        codebook_entropy: entropy,
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        frechet,
    };
    Ok((report, snr, cfg_sweep, mr))
}

/// Trains, samples and evaluates from `cfg`. Only the configured data
/// folder, if any, is touched.
pub fn run_experiment(cfg: &ExperimentConfig, on_step: impl FnMut(usize, f32)) -> Result<ExperimentOutcome> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        bail!(Config, "{}", problems.join("\n"));
    }
    let data = load_dataset(cfg)?;
    let tokenizer = fit_tokenizer(cfg, &data)?;
    let pyramids = encode_dataset(&tokenizer, &data)?;
    let (model, trainer, loss_curve) = train_model(cfg, &tokenizer, &pyramids, on_step)?;
    let mut checkpoint = Checkpoint::new(model, tokenizer, cfg.seed);
    checkpoint.trainer = Some(trainer);
    let (report, snr, cfg_sweep, mr_sweep) = evaluate(cfg, &checkpoint, &data)?;
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        report,
        loss_curve,
        snr,
        cfg_sweep,
        mr_sweep,
        checkpoint,
    })
}

fn f(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else if x > 0.0 {
        "inf".into()
    } else {
        x.to_string()
    }
}

impl ExperimentOutcome {
    /// Two-column `metric<TAB>value` table.
    pub fn report_tsv(&self) -> String {
        let r = &self.report;
        let mut out = String::from("metric\tvalue\n");
        for (k, side) in self.config.schedule.sides().iter().enumerate() {
            let _ = writeln!(out, "snr_db_s{side}\t{}", f(r.snr_per_scale[k]));
        }
        for (name, v) in [
            ("token_accuracy", r.token_accuracy),
            ("nats_per_token", r.nats_per_token),
            ("codebook_entropy", r.codebook_entropy),
            ("sr_psnr_db", r.psnr),
            ("sr_ssim", r.ssim),
            ("frechet", r.frechet),
        ] {
            let _ = writeln!(out, "{name}\t{}", f(v));
        }
        if let Some(l) = self.loss_curve.last() {
            let _ = writeln!(out, "final_train_loss\t{}", f(*l as f64));
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        let s = Summary {
            seed: self.config.seed,
            steps: self.config.steps,
            mask: self.config.mask.to_string(),
            schedule: self.config.schedule.to_string(),
            final_loss: self.loss_curve.last().copied(),
            metrics: &self.report,
            cfg_sweep: &self.cfg_sweep,
            mr_sweep: &self.mr_sweep,
        };
        serde_json::to_string_pretty(&s).map_err(|e| crate::Error::Format(e.to_string()))
    }

    /// Writes `report.tsv`, `summary.json`, `loss.tsv`, `snr.tsv`,
    /// `cfg_sweep.tsv`, `mr_sweep.tsv`, `config.ini` and `model.ckpt`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.tsv"), self.report_tsv())?;
        std::fs::write(dir.join("summary.json"), self.summary_json()? + "\n")?;
        std::fs::write(dir.join("config.ini"), self.config.to_ini())?;

        let mut loss = String::from("step\tloss\n");
        for (i, l) in self.loss_curve.iter().enumerate() {
            let _ = writeln!(loss, "{i}\t{l}");
        }
        std::fs::write(dir.join("loss.tsv"), loss)?;

        let sides = self.config.schedule.sides();
        let mut snr = String::from("image");
        for s in sides {
            let _ = write!(snr, "\tsnr_db_s{s}");
        }
        snr.push('\n');
        for (i, row) in self.snr.iter().enumerate() {
            let _ = write!(snr, "{i}");
            for v in row {
                let _ = write!(snr, "\t{}", f(*v));
            }
            snr.push('\n');
        }
        std::fs::write(dir.join("snr.tsv"), snr)?;

        let mut cfg = String::from("cfg_weight\tfrechet\n");
        for (w, d) in &self.cfg_sweep {
            let _ = writeln!(cfg, "{w}\t{}", f(*d));
        }
        std::fs::write(dir.join("cfg_sweep.tsv"), cfg)?;

        let mut mr = String::from("threshold\trefined_fraction\n");
        for (t, r) in &self.mr_sweep {
            let _ = writeln!(mr, "{t}\t{}", f(*r));
        }
        std::fs::write(dir.join("mr_sweep.tsv"), mr)?;

        self.checkpoint.save(&dir.join("model.ckpt"))
    }
}
