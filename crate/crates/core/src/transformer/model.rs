use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Result, TransformerError};
use crate::fsutil::write_atomic;

/// Magic bytes opening a model file.
pub const MODEL_MAGIC: &[u8; 4] = b"TLM1";

/// Offsets of every weight tensor inside the flat parameter vector.
///
/// The order below is also the serialization order:
///
/// ```text
/// embedding      vocab × d_model
/// per layer:
///   attn_norm    d_model
///   wq wk wv wo  d_model × d_model each
///   mlp_norm     d_model
///   w1           d_model × d_ff
///   w2           d_ff × d_model
/// final_norm     d_model
/// lm_head        d_model × vocab
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub embedding: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub final_norm: Range<usize>,
    pub lm_head: Range<usize>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub attn_norm: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub mlp_norm: Range<usize>,
    pub w1: Range<usize>,
    pub w2: Range<usize>,
}

impl ParamLayout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let embedding = take(v * d);
        let layers = (0..c.n_layers)
            .map(|_| LayerLayout {
                attn_norm: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                mlp_norm: take(d),
                w1: take(d * f),
                w2: take(f * d),
            })
            .collect();
        let final_norm = take(d);
        let lm_head = take(d * v);
        Self {
            embedding,
            layers,
            final_norm,
            lm_head,
            total: at,
        }
    }

    /// Ranges holding RMS-norm gains.
    pub fn gain_ranges(&self) -> Vec<Range<usize>> {
        let mut out: Vec<_> = self
            .layers
            .iter()
            .flat_map(|l| [l.attn_norm.clone(), l.mlp_norm.clone()])
            .collect();
        out.push(self.final_norm.clone());
        out
    }
}

/// Weights plus configuration. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLmModel {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl TinyLmModel {
    /// All-zero weights, including norm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let params = vec![0.0; layout.total];
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Random initialization: unit gains, `N(0, 1)` embeddings, projections
    /// drawn from `N(0, scale/√fan_in)`, with residual-branch outputs further
    /// divided by `√(2·n_layers)`.
    pub fn random(config: ModelConfig, seed: u64, scale: f64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let residual = (2.0 * c.n_layers as f64).sqrt();
        let mut fill = |params: &mut [f64], std: f64| {
            let normal = Normal::new(0.0, std).expect("finite std");
            for p in params {
                *p = normal.sample(&mut rng);
            }
        };
        let layout = model.layout.clone();
        let p = &mut model.params;
        let d_std = scale / (c.d_model as f64).sqrt();
        fill(&mut p[layout.embedding.clone()], 1.0);
        for l in &layout.layers {
            p[l.attn_norm.clone()].fill(1.0);
            p[l.mlp_norm.clone()].fill(1.0);
            fill(&mut p[l.wq.clone()], d_std);
            fill(&mut p[l.wk.clone()], d_std);
            fill(&mut p[l.wv.clone()], d_std);
            fill(&mut p[l.wo.clone()], d_std / residual);
            fill(&mut p[l.w1.clone()], d_std);
            fill(&mut p[l.w2.clone()], scale / (c.d_ff as f64).sqrt() / residual);
        }
        p[layout.final_norm.clone()].fill(1.0);
        fill(&mut p[layout.lm_head.clone()], d_std);
        Ok(model)
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(TransformerError::Config(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn slice(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    pub fn embedding_row(&self, token: usize) -> &[f64] {
        let d = self.config.d_model;
        let start = self.layout.embedding.start + token * d;
        &self.params[start..start + d]
    }

    pub(crate) fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.config.vocab_size {
            return Err(TransformerError::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Serializes to the little-endian `TLM1` container.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        w.write_all(MODEL_MAGIC)?;
        for field in [
            c.n_layers,
            c.n_heads,
            c.d_model,
            c.d_ff,
            c.vocab_size,
            c.d_head(),
            c.train_context_len,
        ] {
            w.write_all(&(field as u32).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MODEL_MAGIC {
            return Err(TransformerError::Format(format!(
                "bad magic {magic:?}, expected {MODEL_MAGIC:?}"
            )));
        }
        let mut fields = [0usize; 7];
        for f in fields.iter_mut() {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, "header")?;
            *f = u32::from_le_bytes(b) as usize;
        }
        let [n_layers, n_heads, d_model, d_ff, vocab_size, d_head, train_context_len] = fields;
        let config = ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_ff,
            vocab_size,
            train_context_len,
        };
        config.validate()?;
        if d_head != config.d_head() {
            return Err(TransformerError::Format(format!(
                "stored d_head {d_head} disagrees with d_model/n_heads = {}",
                config.d_head()
            )));
        }
        let total = ParamLayout::new(&config).total;
        let mut params = Vec::with_capacity(total);
        let mut b = [0u8; 8];
        for _ in 0..total {
            read_exact(&mut r, &mut b, "weights")?;
            params.push(f64::from_le_bytes(b));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(TransformerError::Format("trailing bytes after weights".into()));
        }
        Self::from_params(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(32 + self.params.len() * 8);
        self.write_to(&mut bytes)?;
        write_atomic(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            TransformerError::Format(format!("truncated while reading {what}"))
        }
        _ => TransformerError::Io(e),
    })
}
