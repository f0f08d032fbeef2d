//! `srdd` command line. Seeds resolve as explicit flag, then `SRDD_SEED`,
//! then the config file or built-in default.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::config::ExperimentConfig;
use super::dataset::{make_toy_dataset, ToyDataset};
use super::experiment::{encode_dataset, evaluate, fit_tokenizer, load_dataset, run_experiment, train_model, ExperimentOutcome};
use super::verify::verify_equivalence;
use crate::distill::{cost_report, finetune_student, preset, prune_schedule, FinetuneConfig, MaskComparison, PruneSpec};
use crate::error::{bail, Error, Result};
use crate::image::Image;
use crate::model::{Checkpoint, MaskKind};
use crate::numerics::AdamWConfig;
use crate::sampler::{edit, generate, EditMask, EditTask, SamplerConfig};
use crate::tokenizer::{ScaleSchedule, Tokenizer};

pub const SEED_ENV: &str = "SRDD_SEED";

#[derive(Debug, Parser)]
#[command(name = "srdd", version, about = "Next-scale generation as discrete diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural labelled image folder.
    MakeDataset {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a tokenizer on an image folder and optionally write pyramids.
    Tokenize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "1,2,3,4")]
        schedule: ScaleSchedule,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        patch: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Folder for one `.srdp` pyramid per image.
        #[arg(long)]
        pyramids: Option<PathBuf>,
    },
    /// Train a model from a config and save a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Image folder overriding the configured data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss table.
        #[arg(long)]
        loss: Option<PathBuf>,
    },
    /// Generate one image.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        class: Option<usize>,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write the token pyramid.
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
    /// Zero-shot inpainting, outpainting or super-resolution.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        task: TaskKind,
        #[arg(long)]
        image: PathBuf,
        /// P5 mask, 255 known and 0 unknown; required for inpaint and outpaint.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Side of the low-resolution source for `sr`; inferred from the image when omitted.
        #[arg(long)]
        source_side: Option<usize>,
        #[arg(long)]
        class: Option<usize>,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a student on a pruned scale schedule.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, conflicts_with = "preset")]
        keep: Option<ScaleSchedule>,
        #[arg(long)]
        preset: Option<String>,
        /// Permit dropping one of the two largest teacher sides.
        #[arg(long)]
        allow_override: bool,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        /// Image folder; procedural data matching the teacher when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print analytic teacher/student costs.
    Cost {
        /// Schedule such as `1,2,3,4,5,6,8,10,13,16`, or a checkpoint file.
        #[arg(long)]
        teacher: String,
        /// Schedule, checkpoint file or preset name.
        #[arg(long)]
        student: String,
        #[arg(long, default_value = "markovian")]
        mask: MaskKind,
        #[arg(long)]
        allow_override: bool,
    },
    /// Run the loss-equivalence, KL and mask-locality oracle suite.
    VerifyEquivalence {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment from a config, or evaluate an existing checkpoint.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Artifact directory overriding the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Validate the config and stop.
        #[arg(long)]
        dry_run: bool,
        /// Print the resolved config with documentation and stop.
        #[arg(long)]
        print_config: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskKind {
    Inpaint,
    Outpaint,
    Sr,
}

#[derive(Clone, Debug, Args)]
pub struct SamplerArgs {
    #[arg(long = "cfg", default_value_t = 5.0)]
    pub cfg_weight: f32,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f32,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    pub mr_threshold: f64,
    #[arg(long, default_value_t = 5)]
    pub mr_steps: usize,
    #[arg(long, default_value_t = 1)]
    pub sr_steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SamplerArgs {
    fn resolve(&self) -> Result<SamplerConfig> {
        let cfg = SamplerConfig {
            cfg_weight: self.cfg_weight,
            temperature: self.temperature,
            top_k: self.top_k,
            mr_threshold: self.mr_threshold,
            mr_steps: self.mr_steps,
            sr_steps: self.sr_steps,
            seed: resolve_seed(self.seed, 0)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
    }
}

fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(fallback),
    })
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.seed = resolve_seed(seed, cfg.seed)?;
    Ok(cfg)
}

fn class_or_null(ckpt: &Checkpoint, class: Option<usize>) -> usize {
    class.unwrap_or(ckpt.model.config().null_class())
}

/// Schedule literal, preset name or checkpoint path.
fn schedule_arg(s: &str) -> Result<ScaleSchedule> {
    if let Ok(sched) = s.parse::<ScaleSchedule>() {
        return Ok(sched);
    }
    if let Ok(spec) = preset(s) {
        return Ok(spec.student);
    }
    let path = Path::new(s);
    if path.exists() {
        return Ok(Checkpoint::load(path)?.model.config().schedule.clone());
    }
    bail!(Config, "{s:?} is neither a schedule, a preset nor a checkpoint file")
}

fn write_outcome(out: &mut dyn Write, outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    outcome.write_artifacts(dir)?;
    out.write_all(outcome.report_tsv().as_bytes())?;
    writeln!(out, "artifacts\t{}", dir.display())?;
    Ok(())
}

/// Runs one parsed command, writing its report to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::MakeDataset {
            classes,
            per_class,
            side,
            seed,
            out: dir,
        } => {
            let data = make_toy_dataset(classes, per_class, side, resolve_seed(seed, 0)?)?;
            data.save(&dir)?;
            writeln!(out, "wrote {} images of {} classes to {}", data.len(), classes, dir.display())?;
        }
        Command::Tokenize {
            data,
            schedule,
            vocab,
            dim,
            patch,
            seed,
            out: path,
            pyramids,
        } => {
            let side = schedule.max_side() * patch;
            let data = ToyDataset::load(&data, Some(side))?;
            let tok = Tokenizer::fit(&data.images, schedule, vocab, dim, patch, resolve_seed(seed, 0)?)?;
            tok.save(&path)?;
            if let Some(dir) = pyramids {
                std::fs::create_dir_all(&dir)?;
                for (i, p) in encode_dataset(&tok, &data)?.iter().enumerate() {
                    let f = std::fs::File::create(dir.join(format!("{i:05}.srdp")))?;
                    p.write_to(std::io::BufWriter::new(f), vocab)?;
                }
            }
            writeln!(out, "tokenizer\t{}\nschedule\t{}\nimages\t{}", path.display(), tok.schedule, data.len())?;
        }
        Command::Train {
            config,
            data,
            steps,
            seed,
            out: path,
            loss,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(d) = data {
                cfg.source = Some(d);
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let problems = cfg.problems();
            if !problems.is_empty() {
                bail!(Config, "{}", problems.join("\n"));
            }
            let data = load_dataset(&cfg)?;
            let tok = fit_tokenizer(&cfg, &data)?;
            let pyramids = encode_dataset(&tok, &data)?;
            let total = cfg.steps;
            let (model, trainer, curve) = train_model(&cfg, &tok, &pyramids, |step, l| {
                if (step + 1) % 100 == 0 || step + 1 == total {
                    eprintln!("step {:>6}/{total}  loss {l:.4}", step + 1);
                }
            })?;
            let mut ckpt = Checkpoint::new(model, tok, cfg.seed);
            ckpt.trainer = Some(trainer);
            ckpt.save(&path)?;
            if let Some(lp) = loss {
                let mut t = String::from("step\tloss\n");
                for (i, l) in curve.iter().enumerate() {
                    t.push_str(&format!("{i}\t{l}\n"));
                }
                std::fs::write(lp, t)?;
            }
            writeln!(out, "checkpoint\t{}", path.display())?;
            if let Some(l) = curve.last() {
                writeln!(out, "final_loss\t{l}")?;
            }
        }
        Command::Sample {
            ckpt,
            class,
            sampler,
            out: path,
            tokens,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let cfg = sampler.resolve()?;
            let class = class_or_null(&ckpt, class);
            let p = generate(&ckpt.model, &ckpt.tokenizer.codebook, class, &cfg)?;
            ckpt.tokenizer.decode_image(&p)?.save(&path)?;
            if let Some(tp) = tokens {
                let f = std::fs::File::create(tp)?;
                p.write_to(std::io::BufWriter::new(f), ckpt.tokenizer.codebook.vocab_size())?;
            }
            writeln!(out, "class\t{class}\nseed\t{}\nimage\t{}", cfg.seed, path.display())?;
        }
        Command::Edit {
            ckpt,
            task,
            image,
            mask,
            source_side,
            class,
            sampler,
            out: path,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let cfg = sampler.resolve()?;
            let source = Image::load(&image)?;
            let task = match task {
                TaskKind::Inpaint | TaskKind::Outpaint => {
                    let Some(m) = mask else {
                        bail!(Config, "--mask is required for {task:?}");
                    };
                    let m = EditMask::from_image(&Image::load(&m)?)?;
                    if task == TaskKind::Inpaint {
                        EditTask::Inpaint(m)
                    } else {
                        EditTask::Outpaint(m)
                    }
                }
                TaskKind::Sr => {
                    let patch = ckpt.tokenizer.embedder.patch();
                    let side = match source_side {
                        Some(s) => s,
                        None if source.width % patch == 0 => source.width / patch,
                        None => bail!(Config, "cannot infer --source-side from a {}-pixel image", source.width),
                    };
                    EditTask::SuperRes { source_side: side }
                }
            };
            let class = class_or_null(&ckpt, class);
            let p = edit(&ckpt.model, &ckpt.tokenizer, &source, &task, class, &cfg)?;
            ckpt.tokenizer.decode_image(&p)?.save(&path)?;
            writeln!(out, "class\t{class}\nseed\t{}\nimage\t{}", cfg.seed, path.display())?;
        }
        Command::Distill {
            teacher,
            keep,
            preset: name,
            allow_override,
            steps,
            batch_size,
            lr,
            data,
            per_class,
            seed,
            out: path,
        } => {
            let teacher = Checkpoint::load(&teacher)?;
            let tsched = &teacher.model.config().schedule;
            let spec: PruneSpec = match (keep, name) {
                (Some(k), None) => prune_schedule(tsched, k.sides(), allow_override)?,
                (None, Some(n)) => {
                    let p = preset(&n)?;
                    prune_schedule(tsched, p.student.sides(), allow_override || p.top_two_override)?
                }
                _ => bail!(Config, "give exactly one of --keep or --preset"),
            };
            let seed = resolve_seed(seed, teacher.seed)?;
            let side = teacher.tokenizer.image_side();
            let data = match data {
                Some(d) => ToyDataset::load(&d, Some(side))?,
                None => make_toy_dataset(teacher.model.config().num_classes, per_class, side, seed)?,
            };
            let corpus = data.features(&teacher.tokenizer)?;
            let cfg = FinetuneConfig {
                steps,
                batch_size,
                optimizer: AdamWConfig {
                    lr,
                    ..AdamWConfig::default()
                },
                seed,
            };
            let student = finetune_student(&teacher, &spec, &corpus, &cfg)?;
            student.save(&path)?;
            writeln!(out, "teacher\t{}\nstudent\t{}\ncheckpoint\t{}", spec.teacher, spec.student, path.display())?;
            writeln!(out, "{}", cost_report(&spec, student.model.config().mask))?;
        }
        Command::Cost {
            teacher,
            student,
            mask,
            allow_override,
        } => {
            let t = schedule_arg(&teacher)?;
            let s = schedule_arg(&student)?;
            let over = allow_override || preset(&student).is_ok_and(|p| p.top_two_override);
            let spec = prune_schedule(&t, s.sides(), over)?;
            let report = cost_report(&spec, mask);
            writeln!(out, "{report}")?;
            for (label, sched) in [("teacher", &spec.teacher), ("student", &spec.student)] {
                let m = MaskComparison::new(sched);
                writeln!(
                    out,
                    "{label}_block_causal_over_markovian\tattention_pairs {:.6}\tkv_retention {:.6}",
                    m.attention_reduction(),
                    m.kv_reduction()
                )?;
            }
        }
        Command::VerifyEquivalence { trials, seed } => {
            let results = verify_equivalence(trials, resolve_seed(seed, 0)?)?;
            writeln!(out, "check\tresult\tdetail")?;
            for r in &results {
                writeln!(out, "{r}")?;
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                bail!(Numeric, "failed checks: {}", failed.join(", "));
            }
        }
        Command::Eval {
            config,
            ckpt,
            out: dir,
            seed,
            dry_run,
            print_config,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(d) = dir {
                cfg.out_dir = d;
            }
            let problems = cfg.problems();
            if !problems.is_empty() {
                bail!(Config, "{}", problems.join("\n"));
            }
            if print_config {
                out.write_all(cfg.to_ini().as_bytes())?;
                return Ok(());
            }
            if dry_run {
                writeln!(out, "config ok")?;
                return Ok(());
            }
            let outcome = match ckpt {
                None => run_experiment(&cfg, |_, _| {})?,
                Some(path) => {
                    let checkpoint = Checkpoint::load(&path)?;
                    cfg.schedule = checkpoint.model.config().schedule.clone();
                    cfg.classes = checkpoint.model.config().num_classes;
                    cfg.patch = checkpoint.tokenizer.embedder.patch();
                    let data = load_dataset(&cfg)?;
                    let (report, snr, cfg_sweep, mr_sweep) = evaluate(&cfg, &checkpoint, &data)?;
                    ExperimentOutcome {
                        config: cfg.clone(),
                        report,
                        loss_curve: Vec::new(),
                        snr,
                        cfg_sweep,
                        mr_sweep,
                        checkpoint,
                    }
                }
            };
            write_outcome(out, &outcome, &cfg.out_dir)?;
        }
    }
    Ok(())
}
