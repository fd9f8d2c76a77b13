//! Toy decoder-only language model.
//!
//! Pre-norm blocks (RMS norm → multi-head attention with rotary positions →
//! residual, RMS norm → SiLU MLP → residual), a final RMS norm and an untied
//! output projection. Two execution paths share the weights:
//!
//! * [`Session`] decodes one token at a time against a [`CacheSet`] whose
//!   eviction policy decides which past tokens are visible;
//! * [`forward_full`] runs a whole sequence with causal attention and no
//!   cache, and is the path that training differentiates.

mod backprop;
mod decode;
mod model;
mod train;

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kvcache::CacheError;

pub use backprop::{
    batch_loss, forward_full, grad_check, grad_check_with, loss_and_grad, sequence_loss,
    FullForward, GradCheckOptions, GradCheckReport, Targets,
};
pub use decode::{
    forward_step, generate, sliding_recompute_perplexity, streaming_perplexity, Generation,
    PolicySpec, Session,
};
pub use model::{ParamLayout, TinyLmModel, MODEL_MAGIC};
pub use train::{train_char_lm, train_with, TrainOptions, TrainOutcome};

pub(crate) use crate::kvcache::CacheSet;

/// RMS-norm epsilon used by every norm in the model.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum TransformerError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("cache layout {got_layers}x{got_heads} does not match model {layers}x{heads}")]
    CacheLayout {
        layers: usize,
        heads: usize,
        got_layers: usize,
        got_heads: usize,
    },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error(
        "prompt of {prompt_len} tokens does not fit the sink cache (capacity {capacity}); \
         every prompt token must stay resident as an attention sink, so the cache must be \
         at least as large as the prompt"
    )]
    PromptExceedsSinkCache { prompt_len: usize, capacity: usize },
    #[error("token stream needs at least 2 tokens, got {0}")]
    StreamTooShort(usize),
    #[error("corpus of {len} bytes is too small; need at least {required}")]
    CorpusTooSmall { len: usize, required: usize },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = TransformerError> = std::result::Result<T, E>;

/// Hyperparameters. Field order is the on-disk order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub train_context_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 128,
            vocab_size: 256,
            train_context_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("train_context_len", self.train_context_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(TransformerError::Config(format!("{name} must be at least 1")));
        }
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v > u32::MAX as usize) {
            return Err(TransformerError::Config(format!("{name} exceeds u32")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(TransformerError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_head() % 2 != 0 {
            return Err(TransformerError::Config(format!(
                "head width {} must be even for rotary encoding",
                self.d_head()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        ParamLayout::new(self).total
    }
}
