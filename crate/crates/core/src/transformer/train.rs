//! Byte-level training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::backprop::{loss_and_grad, Targets};
use super::{ModelConfig, Result, TinyLmModel, TransformerError};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Windows per step, each `train_context_len + 1` bytes long.
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Std multiplier passed to [`TinyLmModel::random`].
    pub init_scale: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            seed: 0,
            learning_rate: 1.0,
            batch_size: 8,
            clip_norm: 1.0,
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TinyLmModel,
    /// Mean batch loss at each step, before that step's update.
    pub losses: Vec<f64>,
}

/// Trains a byte-level model with default options apart from the arguments.
pub fn train_char_lm(
    corpus: &[u8],
    config: ModelConfig,
    steps: usize,
    seed: u64,
    learning_rate: f64,
) -> Result<TinyLmModel> {
    let opts = TrainOptions {
        steps,
        seed,
        learning_rate,
        ..Default::default()
    };
    Ok(train_with(corpus, config, &opts)?.model)
}

pub fn train_with(corpus: &[u8], config: ModelConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if config.vocab_size < 256 {
        return Err(TransformerError::Config(format!(
            "byte-level training needs vocab_size >= 256, got {}",
            config.vocab_size
        )));
    }
    let window = config.train_context_len + 1;
    let required = 10 * config.train_context_len;
    if corpus.len() < required.max(window) {
        return Err(TransformerError::CorpusTooSmall {
            len: corpus.len(),
            required: required.max(window),
        });
    }
    if opts.batch_size == 0 {
        return Err(TransformerError::Config("batch_size must be at least 1".into()));
    }

    let mut model = TinyLmModel::random(config, opts.seed, opts.init_scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_da7a);
    let mut losses = Vec::with_capacity(opts.steps);
    let tokens: Vec<usize> = corpus.iter().map(|&b| b as usize).collect();
    let last_start = tokens.len() - window;

    for _ in 0..opts.steps {
        let batch: Vec<&[usize]> = (0..opts.batch_size)
            .map(|_| {
                let s = rng.random_range(0..=last_start);
                &tokens[s..s + window]
            })
            .collect();
        let (loss, mut grad) = parallel_loss_and_grad(&model, &batch)?;
        losses.push(loss);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > opts.clip_norm {
            let k = opts.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= k);
        }
        for (p, g) in model.params_mut().iter_mut().zip(&grad) {
            *p -= opts.learning_rate * g;
        }
    }
    Ok(TrainOutcome { model, losses })
}

/// Per-window gradients run in parallel; the sum is taken in batch order so
/// the result does not depend on thread scheduling.
fn parallel_loss_and_grad(model: &TinyLmModel, batch: &[&[usize]]) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|w| loss_and_grad(model, &w[..w.len() - 1], Targets::Hard(&w[1..])))
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params().len()];
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}
