//! Incremental decoding against a policy-governed cache.

use serde::{Deserialize, Serialize};

use super::backprop::run_forward;
use super::{CacheSet, Result, TinyLmModel, TransformerError, NORM_EPS};
use crate::kvcache::{AttendScratch, CachePolicy};
use crate::numerics::{inv_rms, matmul_acc, RopeTable, ROPE_BASE};

/// Cache policy as requested by a caller, before the prompt length is known.
///
/// A Sink policy without an explicit sink length makes the whole prompt the
/// sink segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Dense,
    Window {
        window_len: usize,
    },
    Sink {
        sink_len: Option<usize>,
        recent_len: usize,
    },
}

impl PolicySpec {
    pub fn resolve(&self, prompt_len: usize) -> Result<CachePolicy> {
        let policy = match *self {
            PolicySpec::Dense => CachePolicy::Dense,
            PolicySpec::Window { window_len } => CachePolicy::window(window_len)?,
            PolicySpec::Sink {
                sink_len,
                recent_len,
            } => {
                let sink_len = sink_len.unwrap_or(prompt_len);
                let policy = CachePolicy::sink(sink_len, recent_len)?;
                if prompt_len > sink_len + recent_len {
                    return Err(TransformerError::PromptExceedsSinkCache {
                        prompt_len,
                        capacity: sink_len + recent_len,
                    });
                }
                policy
            }
        };
        Ok(policy)
    }
}

impl From<CachePolicy> for PolicySpec {
    fn from(p: CachePolicy) -> Self {
        match p {
            CachePolicy::Dense => PolicySpec::Dense,
            CachePolicy::Window { window_len } => PolicySpec::Window { window_len },
            CachePolicy::Sink {
                sink_len,
                recent_len,
            } => PolicySpec::Sink {
                sink_len: Some(sink_len),
                recent_len,
            },
        }
    }
}

impl std::str::FromStr for PolicySpec {
    type Err = crate::kvcache::CacheError;

    /// Accepts everything [`CachePolicy`] parses, plus `sink:prompt,R`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("sink:prompt,") {
            let recent_len = rest
                .trim()
                .parse()
                .map_err(|_| crate::kvcache::CacheError::Parse(s.to_string()))?;
            CachePolicy::sink(0, recent_len)?;
            return Ok(PolicySpec::Sink {
                sink_len: None,
                recent_len,
            });
        }
        s.parse::<CachePolicy>().map(Into::into)
    }
}

#[derive(Default)]
struct StepScratch {
    x: Vec<f64>,
    h: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>,
    a: Vec<f64>,
    attend: AttendScratch,
}

/// A decoding session: one model, one cache set, one token at a time.
pub struct Session<'m> {
    model: &'m TinyLmModel,
    caches: CacheSet,
    rope: RopeTable,
    next_step: usize,
    scratch: StepScratch,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m TinyLmModel, policy: CachePolicy) -> Result<Self> {
        let c = model.config();
        let caches = CacheSet::new(policy, c.n_layers, c.n_heads)?;
        Self::with_caches(model, caches)
    }

    pub fn with_caches(model: &'m TinyLmModel, caches: CacheSet) -> Result<Self> {
        check_layout(model, &caches)?;
        let rope = RopeTable::new(model.config().d_head(), ROPE_BASE).expect("validated config");
        Ok(Self {
            model,
            caches,
            rope,
            next_step: 0,
            scratch: StepScratch::default(),
        })
    }

    pub fn caches(&self) -> &CacheSet {
        &self.caches
    }

    pub fn steps(&self) -> usize {
        self.next_step
    }

    /// Feeds `token` at the next step and returns next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let logits = step_impl(
            self.model,
            token,
            &mut self.caches,
            self.next_step,
            &mut self.rope,
            &mut self.scratch,
        )?;
        self.next_step += 1;
        Ok(logits)
    }
}

fn check_layout(model: &TinyLmModel, caches: &CacheSet) -> Result<()> {
    let c = model.config();
    if caches.n_layers() != c.n_layers || caches.n_heads() != c.n_heads {
        return Err(TransformerError::CacheLayout {
            layers: c.n_layers,
            heads: c.n_heads,
            got_layers: caches.n_layers(),
            got_heads: caches.n_heads(),
        });
    }
    Ok(())
}

/// One decoding step: appends this token's keys/values to every cache and
/// returns next-token logits. `step_index` is the token's original position.
pub fn forward_step(
    model: &TinyLmModel,
    token_id: usize,
    caches: &mut CacheSet,
    step_index: usize,
) -> Result<Vec<f64>> {
    check_layout(model, caches)?;
    let mut rope = RopeTable::new(model.config().d_head(), ROPE_BASE).expect("validated config");
    step_impl(model, token_id, caches, step_index, &mut rope, &mut StepScratch::default())
}

fn rms_into(x: &[f64], gain: &[f64], out: &mut Vec<f64>) {
    let r = inv_rms(x, NORM_EPS);
    out.clear();
    out.extend(x.iter().zip(gain).map(|(v, g)| g * v * r));
}

fn step_impl(
    model: &TinyLmModel,
    token: usize,
    caches: &mut CacheSet,
    step_index: usize,
    rope: &mut RopeTable,
    s: &mut StepScratch,
) -> Result<Vec<f64>> {
    model.check_token(token)?;
    let c = *model.config();
    let (d, f, dh) = (c.d_model, c.d_ff, c.d_head());
    let layout = model.layout();
    s.x.clear();
    s.x.extend_from_slice(model.embedding_row(token));
    for (li, l) in layout.layers.iter().enumerate() {
        rms_into(&s.x, model.slice(&l.attn_norm), &mut s.h);
        for buf in [&mut s.q, &mut s.k, &mut s.v, &mut s.att] {
            buf.clear();
            buf.resize(d, 0.0);
        }
        matmul_acc(&s.h, model.slice(&l.wq), &mut s.q, 1, d, d);
        matmul_acc(&s.h, model.slice(&l.wk), &mut s.k, 1, d, d);
        matmul_acc(&s.h, model.slice(&l.wv), &mut s.v, 1, d, d);
        for head in 0..c.n_heads {
            let hs = head * dh..(head + 1) * dh;
            let cache = caches.get_mut(li, head);
            cache.append(s.k[hs.clone()].to_vec(), s.v[hs.clone()].to_vec(), step_index)?;
            let qpos = cache.last_position().expect("just appended");
            cache.attend_into(&s.q[hs.clone()], qpos, rope, &mut s.attend, &mut s.att[hs])?;
        }
        matmul_acc(&s.att, model.slice(&l.wo), &mut s.x, 1, d, d);
        rms_into(&s.x, model.slice(&l.mlp_norm), &mut s.h);
        s.a.clear();
        s.a.resize(f, 0.0);
        matmul_acc(&s.h, model.slice(&l.w1), &mut s.a, 1, d, f);
        for z in s.a.iter_mut() {
            *z /= 1.0 + (-*z).exp();
        }
        matmul_acc(&s.a, model.slice(&l.w2), &mut s.x, 1, f, d);
    }
    rms_into(&s.x, model.slice(&layout.final_norm), &mut s.h);
    let mut logits = vec![0.0; c.vocab_size];
    matmul_acc(&s.h, model.slice(&layout.lm_head), &mut logits, 1, d, c.vocab_size);
    Ok(logits)
}

fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub policy: CachePolicy,
    /// Original positions still cached when generation stopped.
    pub retained_positions: Vec<usize>,
}

/// Greedy decoding (ties go to the lowest token id). Stops after `max_new`
/// tokens or right after emitting `stop_token`.
pub fn generate(
    model: &TinyLmModel,
    prompt: &[usize],
    max_new: usize,
    policy: PolicySpec,
    stop_token: Option<usize>,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(TransformerError::EmptyPrompt);
    }
    let policy = policy.resolve(prompt.len())?;
    let mut session = Session::new(model, policy)?;
    let mut tokens = Vec::with_capacity(max_new);
    if max_new > 0 {
        let mut logits = Vec::new();
        for &tok in prompt {
            logits = session.step(tok)?;
        }
        loop {
            let next = argmax(&logits);
            tokens.push(next);
            if tokens.len() == max_new || Some(next) == stop_token {
                break;
            }
            logits = session.step(next)?;
        }
    }
    Ok(Generation {
        tokens,
        policy,
        retained_positions: session.caches().retained_original_positions(),
    })
}

/// Running mean of next-token cross-entropy, measured in bits.
///
/// Base 2 plus an incremental mean keeps the uniform case exact when the
/// vocabulary is a power of two: every term is `log2(V)` and `2^log2(V) == V`.
#[derive(Default)]
struct BitsMean {
    mean: f64,
    n: usize,
}

impl BitsMean {
    fn push(&mut self, logits: &[f64], target: usize) {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
        let bits = sum.log2() + (max - logits[target]) * std::f64::consts::LOG2_E;
        self.n += 1;
        self.mean += (bits - self.mean) / self.n as f64;
    }

    fn perplexity(&self) -> f64 {
        self.mean.exp2()
    }
}

fn check_stream(model: &TinyLmModel, stream: &[usize]) -> Result<()> {
    if stream.len() < 2 {
        return Err(TransformerError::StreamTooShort(stream.len()));
    }
    stream.iter().try_for_each(|&t| model.check_token(t))
}

/// `exp(mean next-token cross-entropy)`, teacher-forced, with the cache
/// evolving under `policy`.
pub fn streaming_perplexity(
    model: &TinyLmModel,
    stream: &[usize],
    policy: CachePolicy,
) -> Result<f64> {
    check_stream(model, stream)?;
    let mut session = Session::new(model, policy)?;
    let mut acc = BitsMean::default();
    for pair in stream.windows(2) {
        acc.push(&session.step(pair[0])?, pair[1]);
    }
    Ok(acc.perplexity())
}

/// Perplexity when each prediction recomputes dense attention from scratch
/// over the last `window` tokens, at positions `0..window`.
pub fn sliding_recompute_perplexity(
    model: &TinyLmModel,
    stream: &[usize],
    window: usize,
) -> Result<f64> {
    check_stream(model, stream)?;
    if window == 0 {
        return Err(crate::kvcache::CacheError::EmptyWindow.into());
    }
    let mut acc = BitsMean::default();
    for i in 0..stream.len() - 1 {
        let start = (i + 1).saturating_sub(window);
        let acts = run_forward(model, &stream[start..=i], false)?;
        acc.push(acts.last_logits(), stream[i + 1]);
    }
    Ok(acc.perplexity())
}
