use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttentionMask, BlockInput, Transformer};
use crate::error::{bail, Result};
use crate::numerics::{AdamWConfig, OptimizerState, Tape};
use crate::tokenizer::{scale_inputs, Codebook, TokenPyramid};

/// A pyramid with its teacher-forcing inputs precomputed against a frozen
/// codebook.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub blocks: Vec<BlockInput>,
    pub targets: Vec<usize>,
    pub class_label: Option<usize>,
}

impl TrainExample {
    pub fn new(pyramid: &TokenPyramid, codebook: &Codebook) -> Result<Self> {
        pyramid.check_vocab(codebook.vocab_size())?;
        let inputs = scale_inputs(pyramid, codebook)?;
        let blocks = pyramid
            .schedule
            .sides()
            .iter()
            .zip(inputs)
            .map(|(&side, features)| BlockInput { side, features })
            .collect();
        Ok(Self {
            blocks,
            targets: pyramid.flat(),
            class_label: pyramid.class_label,
        })
    }

    pub fn block_lens(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.side * b.side).collect()
    }
}

/// Optimizer plus the seed that drives class dropout. The dropout stream
/// for step `t` is derived from `(seed, t)` so resumed runs replay exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub optimizer: OptimizerState,
    pub seed: u64,
    pub grad_clip: f64,
}

impl Trainer {
    pub fn new(config: AdamWConfig, model: &Transformer, seed: u64) -> Self {
        Self {
            optimizer: OptimizerState::new(config, model.params()),
            seed,
            grad_clip: 1.0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.optimizer.step_count
    }

    fn dropout_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.optimizer.step_count);
        rng
    }
}

/// One AdamW step on the mean per-token cross-entropy of `batch`, computed in
/// a single teacher-forced pass per example under the model's mask. Returns
/// the pre-step loss.
pub fn train_step(model: &mut Transformer, batch: &[TrainExample], trainer: &mut Trainer) -> Result<f32> {
    if batch.is_empty() {
        bail!(Validation, "empty training batch");
    }
    let kind = model.config().mask;
    let null = model.config().null_class();
    let p_drop = model.config().class_dropout_prob;
    let mut rng = trainer.dropout_rng();
    model.params_mut().zero_grad();
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let dropped = rng.random::<f32>() < p_drop;
        let class = match ex.class_label {
            Some(c) if !dropped => c,
            _ => null,
        };
        let mask = AttentionMask::for_blocks(kind, &ex.block_lens());
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &ex.blocks, class, &mask)?;
        let ce = tape.softmax_cross_entropy(logits, &ex.targets)?;
        losses.push(tape.value(ce).data()[0]);
        let scaled = tape.scale(ce, 1.0 / batch.len() as f32);
        tape.backward(scaled, model.params_mut())?;
    }
    let loss = (losses.iter().map(|&l| l as f64).sum::<f64>() / losses.len() as f64) as f32;
    let norm = model.params().grad_norm();
    if !loss.is_finite() || !norm.is_finite() {
        bail!(
            Numeric,
            "non-finite training state at step {}: per-example losses {:?}, grad norm {}",
            trainer.optimizer.step_count,
            losses,
            norm
        );
    }
    model.params_mut().clip_grad_norm(trainer.grad_clip);
    trainer.optimizer.step(model.params_mut())?;
    Ok(loss)
}

/// Runs `steps` updates, cycling through `examples` in order with
/// `batch_size` examples per step. `on_step` sees `(step, loss)`.
pub fn fit(
    model: &mut Transformer,
    examples: &[TrainExample],
    trainer: &mut Trainer,
    steps: usize,
    batch_size: usize,
    mut on_step: impl FnMut(usize, f32),
) -> Result<Vec<f32>> {
    if examples.is_empty() || batch_size == 0 {
        bail!(Validation, "training needs examples and a positive batch size");
    }
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let start = step * batch_size;
        let batch: Vec<TrainExample> = (start..start + batch_size)
            .map(|i| examples[i % examples.len()].clone())
            .collect();
        let loss = train_step(model, &batch, trainer)?;
        on_step(step, loss);
        curve.push(loss);
    }
    Ok(curve)
}
