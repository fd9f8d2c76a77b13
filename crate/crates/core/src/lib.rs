//! KV-cache policy experiments on a toy transformer, plus Verilog
//! tokenization, scoring and linting for generated RTL.

pub mod fsutil;
pub mod harness;
pub mod kvcache;
pub mod numerics;
pub mod promptkit;
pub mod rtllint;
pub mod score;
pub mod transformer;
pub mod vlex;

pub use kvcache::{CacheError, CachePolicy, CacheSet, KvCache};
pub use numerics::{NumericsError, Tensor};
pub use transformer::{ModelConfig, TinyLmModel, TransformerError};
pub use vlex::{tokenize, token_count, TokenKind, VToken, VTokenStream};
pub use score::{score_design, score_pair, DesignScore, ScoreError, ScoreReport};
pub use rtllint::{lint_sources, LintFinding, Rule, Severity, SourceKind};
pub use promptkit::{render_prompt, validate_spec, DesignSpec, ModuleSpec, SpecError};
