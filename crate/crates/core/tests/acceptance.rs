//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! criterion fails. Every tolerance and runtime budget is pinned below.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use srdd::diffusion::{kl_decomposition, masking_forward, sdd_loss, var_loss};
use srdd::distill::{cost_report, prune_schedule};
use srdd::harness::{make_toy_dataset, smooth_corpus};
use srdd::image::Image;
use srdd::model::{
    train_step, AttentionMask, BlockInput, Checkpoint, MaskKind, ModelConfig, ScaleModel, TrainExample, Trainer,
    Transformer,
};
use srdd::numerics::{AdamWConfig, ParamStore, Tape, Tensor};
use srdd::sampler::{edit, generate, guided_logits, masked_resample, sampling_probs, EditMask, EditTask, SamplerConfig};
use srdd::tokenizer::{scale_inputs, snr_per_scale, ScaleSchedule, Tokenizer};

const LOSS_EQ_TRIALS: usize = 100;
const LOSS_EQ_TOL: f64 = 1e-5;
const LOSS_EQ_BUDGET: Duration = Duration::from_secs(30);
const KL_TOL: f64 = 1e-6;
const KL_BUDGET: Duration = Duration::from_secs(10);
const LOCALITY_BUDGET: Duration = Duration::from_secs(60);
const SNR_IMAGES: usize = 128;
const SNR_MIN_MONOTONE: f64 = 0.99;
const SNR_BUDGET: Duration = Duration::from_secs(60);
const MR_THRESHOLDS: [f64; 8] = [1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 5e-1];
const MR_PAPER_AT_HALF: f64 = 0.9912;
const MR_MIN_AT_HALF: f64 = 0.95;
const MR_MAGNITUDE_TOL: f64 = 0.05;
const MR_BUDGET: Duration = Duration::from_secs(60);
const GUIDANCE_TRIALS: usize = 500;
const GUIDANCE_TOL: f64 = 1e-6;
const OVERFIT_TARGET: f64 = 0.05;
const OVERFIT_MAX_STEPS: usize = 500;
const FIRST_STEP_TOL: f64 = 0.1;
const TRAIN_BUDGET: Duration = Duration::from_secs(120);
const FD_EPS: f32 = 1e-3;
const FD_TOL: f64 = 1e-2;
const PAPER_TEACHER: [usize; 10] = [1, 2, 3, 4, 5, 6, 8, 10, 13, 16];
const PAPER_STUDENT: [usize; 6] = [1, 3, 5, 8, 13, 16];
const CLAIMED_TOKENS: (u64, u64) = (1015, 580);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(budget: Duration, start: Instant) -> (bool, String) {
    let e = start.elapsed();
    (e <= budget, format!("{:.2}s of {}s", e.as_secs_f64(), budget.as_secs()))
}

// 1 ------------------------------------------------------------------------

/// Per-scale cross-entropy from single-block passes, summed in test code.
fn chained_nll(model: &Transformer, blocks: &[BlockInput], targets: &[Vec<usize>], class: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (b, t) in blocks.iter().zip(targets) {
        let mask = AttentionMask::for_blocks(MaskKind::Markovian, &[t.len()]);
        let logits = model.logits(std::slice::from_ref(b), class, &mask).unwrap();
        for (i, &tok) in t.iter().enumerate() {
            total += nll(logits.row(i), tok);
        }
        count += t.len();
    }
    total / count as f64
}

fn loss_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let schedule = [1, 2, 4];
    let (mut worst, mut worst_oracle) = (0f64, 0f64);
    for _ in 0..LOSS_EQ_TRIALS {
        let vocab = r.random_range(2..=16);
        let model = noisy_model(tiny_config(&schedule, vocab, MaskKind::Markovian), 0.3, &mut r);
        let cb = random_codebook(vocab, 4, &mut r);
        let class = r.random_range(0..=3);
        let pyr = random_pyramid(model.schedule(), vocab, (class < 3).then_some(class), &mut r);
        let sdd = sdd_loss(&model, &pyr, &cb).unwrap();
        let var = var_loss(&model, &pyr, &cb).unwrap();
        let blocks: Vec<BlockInput> = schedule
            .iter()
            .zip(scale_inputs(&pyr, &cb).unwrap())
            .map(|(&side, features)| BlockInput { side, features })
            .collect();
        let oracle = chained_nll(&model, &blocks, &pyr.tokens, class);
        worst = worst.max((sdd - var).abs());
        worst_oracle = worst_oracle.max((oracle - sdd).abs());
    }
    let (fast, t) = within(LOSS_EQ_BUDGET, start);
    outcome(
        worst < LOSS_EQ_TOL && worst_oracle < LOSS_EQ_TOL && fast,
        format!(
            "{LOSS_EQ_TRIALS} trials: max |sdd-var| {worst:.2e}, max |oracle-sdd| {worst_oracle:.2e} (tol {LOSS_EQ_TOL:e}); {t}"
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn decode_state(mut code: usize, base: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|_| {
            let d = code % base;
            code /= base;
            d
        })
        .collect()
}

/// One forward step: position `T - t` is replaced by MASK, all else kept.
fn forward_prob(prev: &[usize], next: &[usize], t: usize, mask: usize) -> f64 {
    let n = prev.len();
    let ok = (0..n).all(|i| if i == n - t { next[i] == mask } else { next[i] == prev[i] });
    if ok {
        1.0
    } else {
        0.0
    }
}

/// `q(x_{t-1} | x_t, x0)` by Bayes over the whole `(V+1)^T` product space.
fn posterior(x0: &[usize], xt: &[usize], t: usize, vocab: usize) -> Option<HashMap<Vec<usize>, f64>> {
    let n = x0.len();
    let prior = masking_forward(x0, t - 1, vocab).unwrap().sequence;
    let mut post = HashMap::new();
    let mut z = 0.0;
    for code in 0..(vocab + 1).pow(n as u32) {
        let state = decode_state(code, vocab + 1, n);
        let w = if state == prior { 1.0 } else { 0.0 } * forward_prob(&state, xt, t, vocab);
        if w > 0.0 {
            z += w;
            post.insert(state, w);
        }
    }
    (z > 0.0).then(|| post.into_iter().map(|(k, v)| (k, v / z)).collect())
}

/// Per-position KL between marginals of the true posterior and of the
/// model's `Σ_x̂0 q(x_{t-1} | x_t, x̂0) p(x̂0 | x_t)`, where `p` copies
/// unmasked positions and draws masked ones from `probs`.
fn kl_oracle(x0: &[usize], t: usize, vocab: usize, probs: &[Vec<f64>]) -> Vec<f64> {
    let n = x0.len();
    let xt = masking_forward(x0, t, vocab).unwrap().sequence;
    let q = posterior(x0, &xt, t, vocab).unwrap();
    let mut p: HashMap<Vec<usize>, f64> = HashMap::new();
    for code in 0..vocab.pow(n as u32) {
        let hat = decode_state(code, vocab, n);
        let w: f64 = (0..n)
            .map(|i| {
                if xt[i] == vocab {
                    probs[i][hat[i]]
                } else if hat[i] == xt[i] {
                    1.0
                } else {
                    0.0
                }
            })
            .product();
        if w == 0.0 {
            continue;
        }
        if let Some(post) = posterior(&hat, &xt, t, vocab) {
            for (s, pr) in post {
                *p.entry(s).or_insert(0.0) += w * pr;
            }
        }
    }
    (0..n)
        .map(|i| {
            let marg = |m: &HashMap<Vec<usize>, f64>| {
                let mut out = vec![0.0; vocab + 1];
                for (s, w) in m {
                    out[s[i]] += w;
                }
                out
            };
            let (qi, pi) = (marg(&q), marg(&p));
            qi.iter()
                .zip(&pi)
                .filter(|(a, _)| **a > 0.0)
                .map(|(a, b)| a * (a / b).ln())
                .sum()
        })
        .collect()
}

fn kl_decomposition_check() -> Outcome {
    let start = Instant::now();
    let mut r = rng(202);
    let (mut cases, mut off_nonzero, mut worst_on, mut worst_oracle) = (0usize, 0usize, 0f64, 0f64);
    for vocab in 1..=4usize {
        for n in 1..=4usize {
            for code in 0..vocab.pow(n as u32) {
                let x0 = decode_state(code, vocab, n);
                let probs: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        let raw: Vec<f64> = (0..vocab).map(|_| r.random_range(0.05..1.0)).collect();
                        let s: f64 = raw.iter().sum();
                        raw.iter().map(|x| x / s).collect()
                    })
                    .collect();
                for t in 1..=n {
                    let xt = masking_forward(&x0, t, vocab).unwrap();
                    let got = kl_decomposition(&x0, &xt, &probs).unwrap();
                    let oracle = kl_oracle(&x0, t, vocab, &probs);
                    let on = n - t;
                    for i in 0..n {
                        if i != on && got[i] != 0.0 {
                            off_nonzero += 1;
                        }
                        worst_oracle = worst_oracle.max((got[i] - oracle[i]).abs());
                    }
                    worst_on = worst_on.max((got[on] + probs[on][x0[on]].ln()).abs());
                    cases += 1;
                }
            }
        }
    }
    let (fast, tm) = within(KL_BUDGET, start);
    outcome(
        off_nonzero == 0 && worst_on < KL_TOL && worst_oracle < KL_TOL && fast,
        format!(
            "{cases} (V,T,x0,t) cases: {off_nonzero} nonzero off-position terms, on-position |kl+log p| {worst_on:.1e}, max |kl-oracle| {worst_oracle:.1e} (tol {KL_TOL:e}); {tm}"
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn mask_locality() -> Outcome {
    let start = Instant::now();
    let mut r = rng(303);
    let mut schedules = Vec::new();
    for bits in 1u32..16 {
        let sides: Vec<usize> = (1..=4).filter(|s| bits & (1 << (s - 1)) != 0).collect();
        if sides.len() >= 2 {
            schedules.push(sides);
        }
    }
    let mut failures = Vec::new();
    let mut probes = 0;
    for sides in &schedules {
        for kind in [MaskKind::BlockCausal, MaskKind::Markovian] {
            let depends = |q: usize, k: usize| match kind {
                MaskKind::BlockCausal => k <= q,
                MaskKind::Markovian => k == q,
                MaskKind::Full => true,
            };
            let model = noisy_model(tiny_config(sides, 6, kind), 0.3, &mut r);
            let sched = model.schedule().clone();
            let cb = random_codebook(6, 4, &mut r);
            let pyr = random_pyramid(&sched, 6, Some(1), &mut r);
            let blocks: Vec<BlockInput> = sides
                .iter()
                .zip(scale_inputs(&pyr, &cb).unwrap())
                .map(|(&side, features)| BlockInput { side, features })
                .collect();
            let lens = sched.block_lens();
            let mask = AttentionMask::for_blocks(kind, &lens);
            let owner: Vec<usize> = lens.iter().enumerate().flat_map(|(b, &n)| vec![b; n]).collect();
            for q in 0..owner.len() {
                for k in 0..owner.len() {
                    if mask.allowed(q, k) != depends(owner[q], owner[k]) {
                        failures.push(format!("{kind} {sides:?} entry ({q},{k})"));
                    }
                }
            }
            let base = model.logits(&blocks, 1, &mask).unwrap();
            let v = base.shape()[1];
            for j in 0..sides.len() {
                let mut probe_model = model.clone();
                let mut probe_blocks = blocks.clone();
                if j == 0 {
                    let id = probe_model.params().id(&format!("pos.s{}", sides[0])).unwrap();
                    let t = probe_model.params_mut().get_mut(id);
                    let bump = Tensor::randn(t.shape(), 1.0, &mut r);
                    t.add_assign(&bump).unwrap();
                } else {
                    let f = &mut probe_blocks[j].features;
                    let bump = Tensor::randn(f.shape(), 1.0, &mut r);
                    f.add_assign(&bump).unwrap();
                }
                let out = probe_model.logits(&probe_blocks, 1, &mask).unwrap();
                let mut off = 0;
                for (i, &n) in lens.iter().enumerate() {
                    let range = off * v..(off + n) * v;
                    let identical = base.data()[range.clone()] == out.data()[range];
                    if identical == depends(i, j) {
                        failures.push(format!("{kind} {sides:?} block {i} <- {j}"));
                    }
                    off += n;
                    probes += 1;
                }
            }
        }
    }
    let (fast, tm) = within(LOCALITY_BUDGET, start);
    outcome(
        failures.is_empty() && fast,
        if failures.is_empty() {
            format!("{} schedules, {probes} block-pair probes, unaffected blocks bit-identical; {tm}", schedules.len())
        } else {
            format!("mismatches: {}; {tm}", failures.join(", "))
        },
    )
}

// 4 ------------------------------------------------------------------------

fn snr_monotonicity() -> Outcome {
    let start = Instant::now();
    let seed = 2024;
    let schedule = ScaleSchedule::full_16();
    let images = smooth_corpus(SNR_IMAGES, schedule.max_side(), seed);
    let mut violations = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let t = Tensor::new(&[img.height, img.width, img.channels], img.data.clone()).unwrap();
        let snr = snr_per_scale(&t, &schedule).unwrap();
        if let Some(k) = (1..snr.len()).find(|&k| snr[k] < snr[k - 1]) {
            violations.push(format!(
                "seed {seed} image {i}: side {} {:.3} dB < side {} {:.3} dB",
                schedule.side(k),
                snr[k],
                schedule.side(k - 1),
                snr[k - 1]
            ));
        }
    }
    for v in &violations {
        eprintln!("  snr violation: {v}");
    }
    let share = 1.0 - violations.len() as f64 / images.len() as f64;
    let (fast, tm) = within(SNR_BUDGET, start);
    outcome(
        share >= SNR_MIN_MONOTONE && fast,
        format!(
            "{}/{} images monotone over {} ({:.1}%, need {:.0}%); {tm}",
            images.len() - violations.len(),
            images.len(),
            schedule,
            100.0 * share,
            100.0 * SNR_MIN_MONOTONE
        ),
    )
}

// 5 ------------------------------------------------------------------------

/// Refined fraction recomputed from logits: share of context tokens whose
/// own probability is below the threshold.
fn mr_oracle(model: &Transformer, cb: &srdd::tokenizer::Codebook, pyrs: &[srdd::tokenizer::TokenPyramid], threshold: f64) -> f64 {
    let (mut flagged, mut total) = (0usize, 0usize);
    for p in pyrs {
        let inputs = scale_inputs(p, cb).unwrap();
        for (k, (&side, feat)) in p.schedule.sides().iter().zip(inputs).enumerate() {
            let n = side * side;
            let mask = AttentionMask::for_blocks(MaskKind::Markovian, &[n]);
            let block = BlockInput { side, features: feat };
            let logits = model.logits(&[block], p.class_label.unwrap(), &mask).unwrap();
            for i in 0..n {
                let row: Vec<f64> = logits.row(i).iter().map(|&x| x as f64).collect();
                if softmax64(&row)[p.tokens[k][i]] < threshold {
                    flagged += 1;
                }
            }
            total += n;
        }
    }
    flagged as f64 / total as f64
}

fn mr_fraction(model: &Transformer, cb: &srdd::tokenizer::Codebook, pyrs: &[srdd::tokenizer::TokenPyramid], threshold: f64) -> f64 {
    let cfg = SamplerConfig {
        cfg_weight: 0.0,
        mr_threshold: threshold,
        mr_steps: 1,
        ..SamplerConfig::default()
    };
    let (mut flagged, mut total) = (0.0, 0usize);
    for p in pyrs {
        for k in 0..p.schedule.len() {
            let (_, f) = masked_resample(model, cb, p, k, p.class_label.unwrap(), &cfg).unwrap();
            let n = p.schedule.block_len(k);
            flagged += f[0] * n as f64;
            total += n;
        }
    }
    flagged / total as f64
}

fn mr_ordering() -> Outcome {
    let start = Instant::now();
    let mut r = rng(505);
    let vocab = 64;
    let sched = [1, 2, 3, 4];
    let peaked = noisy_model(tiny_config(&sched, vocab, MaskKind::Markovian), 0.5, &mut r);
    let flat = Transformer::new(tiny_config(&sched, vocab, MaskKind::Markovian), 7).unwrap();
    let cb = random_codebook(vocab, 4, &mut r);
    let pyrs: Vec<_> = (0..8)
        .map(|i| random_pyramid(peaked.schedule(), vocab, Some(i % 3), &mut r))
        .collect();
    let mut monotone = true;
    let mut oracle_ok = true;
    let mut rows = Vec::new();
    for (name, model) in [("peaked", &peaked), ("near-uniform", &flat)] {
        let fr: Vec<f64> = MR_THRESHOLDS.iter().map(|&t| mr_fraction(model, &cb, &pyrs, t)).collect();
        let or: Vec<f64> = MR_THRESHOLDS.iter().map(|&t| mr_oracle(model, &cb, &pyrs, t)).collect();
        monotone &= fr.windows(2).all(|w| w[0] <= w[1]);
        oracle_ok &= fr == or;
        rows.push((name, fr));
    }
    let at_half = *rows[1].1.last().unwrap();
    let magnitude = at_half > MR_MIN_AT_HALF && (at_half - MR_PAPER_AT_HALF).abs() <= MR_MAGNITUDE_TOL;
    let (fast, tm) = within(MR_BUDGET, start);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    outcome(
        monotone && oracle_ok && magnitude && fast,
        format!(
            "peaked [{}], near-uniform [{}]; monotone {monotone}, matches oracle {oracle_ok}, at 0.5 {at_half:.4} vs published {MR_PAPER_AT_HALF}; {tm}",
            fmt(&rows[0].1),
            fmt(&rows[1].1)
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn guidance_identities() -> Outcome {
    let mut r = rng(606);
    let mut identities = true;
    let mut worst = 0f64;
    for _ in 0..GUIDANCE_TRIALS {
        let v = r.random_range(2..=8);
        let rows = r.random_range(1..=3);
        let c = Tensor::randn(&[rows, v], 1.0, &mut r);
        let u = Tensor::randn(&[rows, v], 1.0, &mut r);
        let w: f32 = r.random_range(0.0..7.5);
        identities &= guided_logits(&c, &u, 0.0).unwrap() == c;
        identities &= guided_logits(&c, &c, w).unwrap() == c;
        let got = sampling_probs(&guided_logits(&c, &u, w).unwrap(), 1.0, None).unwrap();
        for i in 0..rows {
            let pc = softmax64(&c.row(i).iter().map(|&x| x as f64).collect::<Vec<_>>());
            let pu = softmax64(&u.row(i).iter().map(|&x| x as f64).collect::<Vec<_>>());
            let ratio: Vec<f64> = pc.iter().zip(&pu).map(|(a, b)| a.powf(1.0 + w as f64) / b.powf(w as f64)).collect();
            let z: f64 = ratio.iter().sum();
            for (g, want) in got[i].iter().zip(ratio.iter().map(|x| x / z)) {
                worst = worst.max((g - want).abs());
            }
        }
    }
    outcome(
        identities && worst < GUIDANCE_TOL,
        format!("{GUIDANCE_TRIALS} cases V<=8: identities exact {identities}, max |p - ratio| {worst:.2e} (tol {GUIDANCE_TOL:e})"),
    )
}

// 7 ------------------------------------------------------------------------

fn training_capability() -> Outcome {
    let start = Instant::now();
    let data = make_toy_dataset(4, 1, 16, 77).unwrap();
    let tok = Tokenizer::fit(&data.images, ScaleSchedule::desk(), 64, 16, 4, 78).unwrap();
    let pyrs: Vec<_> = data
        .images
        .iter()
        .zip(&data.labels)
        .map(|(img, &c)| {
            let mut p = tok.encode_image(img).unwrap();
            p.class_label = Some(c);
            p
        })
        .collect();
    let examples: Vec<_> = pyrs.iter().map(|p| TrainExample::new(p, &tok.codebook).unwrap()).collect();
    let config = ModelConfig {
        class_dropout_prob: 0.0,
        ..ModelConfig::desk(4, 16)
    };
    let mut model = Transformer::new(config, 79).unwrap();
    let opt = AdamWConfig {
        lr: 3e-3,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut trainer = Trainer::new(opt, &model, 80);
    let first = train_step(&mut model, &examples, &mut trainer).unwrap() as f64;
    let mut steps = 1;
    let mut last = first;
    while steps < OVERFIT_MAX_STEPS && last >= OVERFIT_TARGET {
        last = train_step(&mut model, &examples, &mut trainer).unwrap() as f64;
        steps += 1;
    }
    let final_nll = {
        let (mut s, mut n) = (0.0, 0);
        for ex in &examples {
            let mask = AttentionMask::for_blocks(MaskKind::Markovian, &ex.block_lens());
            let logits = model.logits(&ex.blocks, ex.class_label.unwrap(), &mask).unwrap();
            for (i, &t) in ex.targets.iter().enumerate() {
                s += nll(logits.row(i), t);
            }
            n += ex.targets.len();
        }
        s / n as f64
    };
    let ln_v = (64f64).ln();
    let (fast, tm) = within(TRAIN_BUDGET, start);
    outcome(
        final_nll < OVERFIT_TARGET && (first - ln_v).abs() < FIRST_STEP_TOL && fast,
        format!(
            "first-step loss {first:.4} vs ln V {ln_v:.4} (tol {FIRST_STEP_TOL}); {final_nll:.4} nats/token after {steps} steps (need < {OVERFIT_TARGET} within {OVERFIT_MAX_STEPS}); {tm}"
        ),
    )
}

// 8 ------------------------------------------------------------------------

/// Builds `loss(store)` from an op graph, runs backward once and audits.
fn audit_op(name: &str, shapes: &[&[usize]], seed: u64, build: impl Fn(&mut Tape, &[srdd::numerics::Var]) -> srdd::numerics::Var) -> (String, f64) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        store.insert(&format!("{name}.{i}"), Tensor::randn(s, 1.0, &mut r)).unwrap();
    }
    let ids: Vec<_> = store.ids().collect();
    let forward = |store: &ParamStore, tape: &mut Tape| {
        let vars: Vec<_> = ids.iter().map(|&id| tape.param(store, id)).collect();
        build(tape, &vars)
    };
    let mut tape = Tape::new();
    let loss = forward(&store, &mut tape);
    tape.backward(loss, &mut store).unwrap();
    let (rel, _) = fd_audit(&mut store, FD_EPS, |s| {
        let mut t = Tape::new();
        let l = forward(s, &mut t);
        t.value(l).data()[0]
    });
    (name.to_string(), rel)
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
fn project(tape: &mut Tape, out: srdd::numerics::Var, seed: u64) -> srdd::numerics::Var {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let m = tape.mul(out, w).unwrap();
    tape.sum(m)
}

fn gradient_audit() -> Outcome {
    let mut results = vec![
        audit_op("matmul", &[&[3, 4], &[4, 2]], 1, |t, v| {
            let o = t.matmul(v[0], v[1]).unwrap();
            project(t, o, 11)
        }),
        audit_op("transpose", &[&[3, 4]], 2, |t, v| {
            let o = t.transpose(v[0]).unwrap();
            project(t, o, 12)
        }),
        audit_op("add", &[&[3, 4], &[3, 4]], 3, |t, v| {
            let o = t.add(v[0], v[1]).unwrap();
            project(t, o, 13)
        }),
        audit_op("add_row", &[&[3, 4], &[4]], 4, |t, v| {
            let o = t.add_row(v[0], v[1]).unwrap();
            project(t, o, 14)
        }),
        audit_op("mul", &[&[3, 4], &[3, 4]], 5, |t, v| {
            let o = t.mul(v[0], v[1]).unwrap();
            project(t, o, 15)
        }),
        audit_op("scale", &[&[3, 4]], 6, |t, v| {
            let o = t.scale(v[0], -1.7);
            project(t, o, 16)
        }),
        audit_op("gelu", &[&[3, 4]], 7, |t, v| {
            let o = t.gelu(v[0]);
            project(t, o, 17)
        }),
        audit_op("layer_norm", &[&[3, 5], &[5], &[5]], 8, |t, v| {
            let o = t.layer_norm(v[0], v[1], v[2]).unwrap();
            project(t, o, 18)
        }),
        audit_op("masked_softmax", &[&[3, 4]], 9, |t, v| {
            let mask: Arc<[bool]> = [true, false, false, false, true, true, false, true, true, true, true, false].into();
            let o = t.masked_softmax(v[0], mask).unwrap();
            project(t, o, 19)
        }),
        audit_op("slice_cols", &[&[3, 5]], 10, |t, v| {
            let o = t.slice_cols(v[0], 1, 3).unwrap();
            project(t, o, 20)
        }),
        audit_op("concat_cols", &[&[3, 2], &[3, 3]], 11, |t, v| {
            let o = t.concat_cols(&[v[0], v[1]]).unwrap();
            project(t, o, 21)
        }),
        audit_op("concat_rows", &[&[2, 3], &[1, 3]], 12, |t, v| {
            let o = t.concat_rows(&[v[0], v[1]]).unwrap();
            project(t, o, 22)
        }),
        audit_op("gather_rows", &[&[4, 3]], 13, |t, v| {
            let o = t.gather_rows(v[0], &[2, 0, 2]).unwrap();
            project(t, o, 23)
        }),
        audit_op("sum", &[&[3, 4]], 14, |t, v| {
            let sq = t.mul(v[0], v[0]).unwrap();
            t.sum(sq)
        }),
        audit_op("softmax_cross_entropy", &[&[3, 5]], 15, |t, v| t.softmax_cross_entropy(v[0], &[4, 0, 2]).unwrap()),
    ];

    let mut r = rng(808);
    let config = ModelConfig {
        depth: 4,
        ..tiny_config(&[1, 2], 5, MaskKind::BlockCausal)
    };
    let model = noisy_model(config, 0.2, &mut r);
    let cb = random_codebook(5, 4, &mut r);
    let pyr = random_pyramid(model.schedule(), 5, Some(2), &mut r);
    let ex = TrainExample::new(&pyr, &cb).unwrap();
    let mask = AttentionMask::for_blocks(MaskKind::BlockCausal, &ex.block_lens());
    let run = |m: &Transformer, tape: &mut Tape| {
        let logits = m.forward(tape, &ex.blocks, 2, &mask).unwrap();
        tape.softmax_cross_entropy(logits, &ex.targets).unwrap()
    };
    let mut model = model;
    let mut tape = Tape::new();
    let loss = run(&model, &mut tape);
    tape.backward(loss, model.params_mut()).unwrap();
    let config = model.config().clone();
    let mut store = model.into_params();
    let (rel, worst_param) = fd_audit(&mut store, FD_EPS, |s| {
        let m = Transformer::from_params(config.clone(), s.clone()).unwrap();
        let mut t = Tape::new();
        let l = run(&m, &mut t);
        t.value(l).data()[0]
    });
    results.push((format!("4-layer model (worst {worst_param})"), rel));

    let failing: Vec<String> = results.iter().filter(|(_, e)| *e >= FD_TOL).map(|(n, e)| format!("{n} {e:.2e}")).collect();
    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    outcome(
        failing.is_empty(),
        format!(
            "{} ops + full model, eps {FD_EPS:e}: worst relative error {worst:.2e} (tol {FD_TOL:e}){}",
            results.len() - 1,
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    )
}

// 9 ------------------------------------------------------------------------

/// Attention pairs and peak KV cache by walking every query/key position.
fn enumerate_costs(sides: &[usize], kind: MaskKind) -> (u64, u64) {
    let owner: Vec<usize> = sides.iter().enumerate().flat_map(|(b, s)| vec![b; s * s]).collect();
    let sees = |qb: usize, kb: usize| match kind {
        MaskKind::Markovian => qb == kb,
        MaskKind::BlockCausal => kb <= qb,
        MaskKind::Full => true,
    };
    let mut pairs = 0u64;
    for &qb in &owner {
        for &kb in &owner {
            pairs += u64::from(sees(qb, kb));
        }
    }
    let mut peak = 0u64;
    for step in 0..sides.len() {
        let cached = owner.iter().filter(|&&kb| kb <= step && sees(step, kb)).count() as u64;
        peak = peak.max(cached);
    }
    (pairs, peak)
}

fn distillation_arithmetic() -> Outcome {
    let teacher = ScaleSchedule::new(PAPER_TEACHER.to_vec()).unwrap();
    let spec = prune_schedule(&teacher, &PAPER_STUDENT, false).unwrap();
    let report = cost_report(&spec, MaskKind::Markovian);
    let pass_ok = report.pass_count_ratio() == 0.6 && report.passes == (10, 6);
    let enum_tokens = (
        PAPER_TEACHER.iter().map(|s| (s * s) as u64).sum::<u64>(),
        PAPER_STUDENT.iter().map(|s| (s * s) as u64).sum::<u64>(),
    );
    let tokens_match_enum = report.tokens == enum_tokens;
    let tokens_match_claim = report.tokens == CLAIMED_TOKENS;
    let (tp, tk) = enumerate_costs(&PAPER_TEACHER, MaskKind::Markovian);
    let (sp, sk) = enumerate_costs(&PAPER_STUDENT, MaskKind::Markovian);
    let pairs_ok = report.attention_pairs == (tp, sp) && report.attention_pair_ratio() == sp as f64 / tp as f64;
    let kv_ok = report.kv_retention == (tk, sk) && report.kv_retention_ratio() == sk as f64 / tk as f64;
    let (bp, bk) = enumerate_costs(&PAPER_TEACHER, MaskKind::BlockCausal);
    let bc = cost_report(&spec, MaskKind::BlockCausal);
    let bc_ok = bc.attention_pairs.0 == bp && bc.kv_retention.0 == bk;
    outcome(
        pass_ok && tokens_match_enum && tokens_match_claim && pairs_ok && kv_ok && bc_ok,
        format!(
            "passes {:?} ratio {} ok {pass_ok}; tokens {:?} = enumeration {enum_tokens:?} {tokens_match_enum}, = stated {CLAIMED_TOKENS:?} {tokens_match_claim}; markovian pairs {:?} kv {:?} match enumeration {}; block-causal teacher pairs {bp} kv {bk} ok {bc_ok}, markovian/block-causal kv {:.3}",
            report.passes,
            report.pass_count_ratio(),
            report.tokens,
            report.attention_pairs,
            report.kv_retention,
            pairs_ok && kv_ok,
            bk as f64 / tk as f64,
        ),
    )
}

// 10 -----------------------------------------------------------------------

fn edit_consistency() -> Outcome {
    let data = make_toy_dataset(3, 2, 16, 91).unwrap();
    let tok = Tokenizer::fit(&data.images, ScaleSchedule::desk(), 32, 8, 4, 92).unwrap();
    let config = ModelConfig::desk(3, 8);
    let config = ModelConfig { vocab: 32, ..config };
    let mut r = rng(93);
    let model = noisy_model(config, 0.1, &mut r);
    let mut checks = Vec::new();
    for (i, img) in data.images.iter().enumerate() {
        let class = data.labels[i];
        let cfg = SamplerConfig { seed: 500 + i as u64, ..SamplerConfig::default() };
        let truth = tok.encode_image(img).unwrap();

        let all = edit(&model, &tok, img, &EditTask::Inpaint(EditMask::filled(16, true)), class, &cfg).unwrap();
        checks.push(("all-known", all.tokens == truth.tokens));

        for &s in &ScaleSchedule::desk().sides()[..3] {
            let low = img.resize_area(s * 4).unwrap();
            let up_truth = tok.encode_image(&low.resize_area(16).unwrap()).unwrap();
            let k = ScaleSchedule::desk().position(s).unwrap();
            let from_low = edit(&model, &tok, &low, &EditTask::SuperRes { source_side: s }, class, &cfg).unwrap();
            checks.push(("sr-low", from_low.tokens[..=k] == up_truth.tokens[..=k]));
            let from_full = edit(&model, &tok, img, &EditTask::SuperRes { source_side: s }, class, &cfg).unwrap();
            checks.push(("sr-full", from_full.tokens[..=k] == truth.tokens[..=k]));
        }

        let none = edit(&model, &tok, img, &EditTask::Outpaint(EditMask::filled(16, false)), class, &cfg).unwrap();
        let plain = generate(&model, &tok.codebook, class, &cfg).unwrap();
        let same_image = tok.decode_image(&none).unwrap() == tok.decode_image(&plain).unwrap();
        checks.push(("all-unknown", none == plain && same_image));
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        format!(
            "{} checks over {} images (all-known, super-resolution from sides 1,2,3, all-unknown){}",
            checks.len(),
            data.len(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

// 11 -----------------------------------------------------------------------

const TINY_INI: &str = "\
[experiment]
seed = 5
out_dir = run
[data]
classes = 2
per_class = 2
[tokenizer]
schedule = 1,2,3,4
vocab = 8
dim = 4
patch = 2
[model]
depth = 1
heads = 2
dim = 16
[train]
steps = 4
batch_size = 2
[sample]
per_class = 2
[eval]
cfg_sweep = 0,2
mr_thresholds = 0.01,0.5
frechet_side = 2
";

fn srdd(dir: &Path, args: &[&str], seed_env: Option<&str>) -> (bool, Vec<u8>) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_srdd"));
    cmd.current_dir(dir).args(args).env_remove("SRDD_SEED");
    if let Some(s) = seed_env {
        cmd.env("SRDD_SEED", s);
    }
    let out = cmd.output().expect("run srdd");
    (out.status.success(), out.stdout)
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn cli_determinism() -> Outcome {
    let verbs: Vec<(&str, Vec<&str>)> = vec![
        ("make-dataset", vec!["make-dataset", "--classes", "2", "--per-class", "2", "--side", "8", "--out", "data"]),
        ("tokenize", vec!["tokenize", "--data", "data", "--schedule", "1,2,3,4", "--vocab", "8", "--dim", "4", "--patch", "2", "--out", "tok.bin", "--pyramids", "pyr"]),
        ("train", vec!["train", "--config", "tiny.ini", "--data", "data", "--out", "model.ckpt", "--loss", "loss.tsv"]),
        ("sample", vec!["sample", "--ckpt", "model.ckpt", "--class", "1", "--cfg", "2", "--seed", "9", "--out", "s.ppm", "--tokens", "s.srdp"]),
        ("edit-inpaint", vec!["edit", "--ckpt", "model.ckpt", "--task", "inpaint", "--image", "data/00000.ppm", "--mask", "mask.pgm", "--class", "0", "--out", "in.ppm"]),
        ("edit-outpaint", vec!["edit", "--ckpt", "model.ckpt", "--task", "outpaint", "--image", "data/00000.ppm", "--mask", "mask.pgm", "--out", "out.ppm"]),
        ("edit-sr", vec!["edit", "--ckpt", "model.ckpt", "--task", "sr", "--image", "low.ppm", "--class", "1", "--out", "sr.ppm"]),
        ("distill", vec!["distill", "--teacher", "model.ckpt", "--keep", "1,3,4", "--steps", "3", "--batch-size", "2", "--data", "data", "--out", "student.ckpt"]),
        ("cost", vec!["cost", "--teacher", "model.ckpt", "--student", "student.ckpt"]),
        ("verify-equivalence", vec!["verify-equivalence", "--trials", "3"]),
        ("eval", vec!["eval", "--config", "tiny.ini", "--out", "eval"]),
    ];
    let root = tempfile::tempdir().unwrap();
    let mut snapshots = Vec::new();
    let mut failures = Vec::new();
    for run in ["a", "b"] {
        let dir = root.path().join(run);
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("tiny.ini"), TINY_INI).unwrap();
        let mask = EditMask::new(8, 8, (0..64).map(|i| i % 8 < 5).collect()).unwrap();
        mask.to_image().save(&dir.join("mask.pgm")).unwrap();
        let mut stdouts = Vec::new();
        for (name, args) in &verbs {
            if *name == "edit-sr" {
                let src = Image::load(&dir.join("data/00000.ppm")).unwrap();
                src.resize_area(4).unwrap().save(&dir.join("low.ppm")).unwrap();
            }
            let (ok, stdout) = srdd(&dir, args, None);
            if !ok {
                failures.push(format!("{name} failed in run {run}"));
            }
            stdouts.push(stdout);
        }
        snapshots.push((stdouts, tree_bytes(&dir)));
    }
    for (i, (name, _)) in verbs.iter().enumerate() {
        if snapshots[0].0[i] != snapshots[1].0[i] {
            failures.push(format!("{name} stdout differs"));
        }
    }
    let files = snapshots[0].1.len();
    if snapshots[0].1 != snapshots[1].1 {
        failures.push("output files differ".into());
    }

    let env_dir = root.path().join("env");
    std::fs::create_dir_all(&env_dir).unwrap();
    let args = ["make-dataset", "--classes", "2", "--per-class", "1", "--side", "8", "--out"];
    let (_, _) = srdd(&env_dir, &[&args[..], &["e1"]].concat(), Some("7"));
    let (_, _) = srdd(&env_dir, &[&args[..], &["e2"]].concat(), Some("7"));
    let (_, _) = srdd(&env_dir, &[&args[..], &["e3"]].concat(), Some("8"));
    let e = |n: &str| tree_bytes(&env_dir.join(n));
    if e("e1") != e("e2") || e("e1") == e("e3") {
        failures.push("SRDD_SEED not honoured".into());
    }

    let ckpt_path = root.path().join("a/model.ckpt");
    let bytes = std::fs::read(&ckpt_path).unwrap();
    let loaded = Checkpoint::load(&ckpt_path).unwrap();
    let again = loaded.to_bytes().unwrap();
    let reloaded = Checkpoint::from_bytes(&again).unwrap();
    let params_equal = loaded.model.params().iter().zip(reloaded.model.params().iter()).all(|(a, b)| a.0 == b.0 && a.1.data() == b.1.data());
    if bytes != again || !params_equal {
        failures.push("checkpoint round-trip not bit-exact".into());
    }

    outcome(
        failures.is_empty(),
        format!(
            "{} verbs run twice, {files} output files and all stdout identical, SRDD_SEED honoured, checkpoint {} bytes round-trips{}",
            verbs.len(),
            bytes.len(),
            if failures.is_empty() { String::new() } else { format!("; problems: {}", failures.join(", ")) }
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("loss equivalence", loss_equivalence),
        ("KL decomposition", kl_decomposition_check),
        ("mask locality", mask_locality),
        ("SNR monotonicity", snr_monotonicity),
        ("MR refined-fraction ordering", mr_ordering),
        ("guidance identities", guidance_identities),
        ("training capability", training_capability),
        ("gradient audit", gradient_audit),
        ("distillation arithmetic", distillation_arithmetic),
        ("edit consistency", edit_consistency),
        ("determinism", cli_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let o = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!("[{verdict}] {:>2}. {name}: {}", i + 1, o.detail);
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
