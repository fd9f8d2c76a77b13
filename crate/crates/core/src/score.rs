//! Token-level scoring of generated RTL against a reference.
//!
//! Two tokens are equal when both kind and lexeme agree. The fix cost of a
//! generation is its unit-cost Levenshtein distance to the reference:
//! substituted tokens, reference tokens that were never generated, and
//! spurious generated tokens all need one edit each.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vlex::{module_chunks, tokenize, TokenKind, VToken, VTokenStream};

/// Pseudo-module holding tokens that sit outside every module.
pub const UNIT_SCOPE: &str = "$unit";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("reference has no tokens; percentages are undefined")]
    EmptyReference,
    #[error("module `{name}` is defined more than once in the {side} set")]
    DuplicateModule { side: Side, name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Reference,
    Generated,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Reference => "reference",
            Side::Generated => "generated",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    Match { ref_idx: usize, gen_idx: usize },
    Substitute { ref_idx: usize, gen_idx: usize },
    /// Reference token missing from the generation.
    Insert { ref_idx: usize },
    /// Generated token with no counterpart in the reference.
    Delete { gen_idx: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub matched: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn fix_cost(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn ref_len(&self) -> usize {
        self.matched + self.substitutions + self.insertions
    }

    pub fn gen_len(&self) -> usize {
        self.matched + self.substitutions + self.deletions
    }

    fn add(&mut self, o: &EditCounts) {
        self.matched += o.matched;
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub ops: Vec<EditOp>,
}

impl Alignment {
    pub fn counts(&self) -> EditCounts {
        let mut c = EditCounts::default();
        for op in &self.ops {
            match op {
                EditOp::Match { .. } => c.matched += 1,
                EditOp::Substitute { .. } => c.substitutions += 1,
                EditOp::Insert { .. } => c.insertions += 1,
                EditOp::Delete { .. } => c.deletions += 1,
            }
        }
        c
    }

    pub fn cost(&self) -> usize {
        self.counts().fix_cost()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub ref_tokens: usize,
    pub gen_tokens: usize,
    pub matched: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub fix_cost: usize,
    pub correct_pct: f64,
    pub success_pct: f64,
}

/// `100 · max(0, n − fix_cost) / n`.
pub fn success_pct(ref_tokens: usize, fix_cost: usize) -> f64 {
    100.0 * ref_tokens.saturating_sub(fix_cost) as f64 / ref_tokens as f64
}

/// `100 · matched / n`.
pub fn correct_pct(ref_tokens: usize, matched: usize) -> f64 {
    100.0 * matched as f64 / ref_tokens as f64
}

impl ScoreReport {
    pub fn from_counts(c: EditCounts) -> Result<Self, ScoreError> {
        let n = c.ref_len();
        if n == 0 {
            return Err(ScoreError::EmptyReference);
        }
        Ok(Self {
            ref_tokens: n,
            gen_tokens: c.gen_len(),
            matched: c.matched,
            substitutions: c.substitutions,
            insertions: c.insertions,
            deletions: c.deletions,
            fix_cost: c.fix_cost(),
            correct_pct: correct_pct(n, c.matched),
            success_pct: success_pct(n, c.fix_cost()),
        })
    }

    pub fn counts(&self) -> EditCounts {
        EditCounts {
            matched: self.matched,
            substitutions: self.substitutions,
            insertions: self.insertions,
            deletions: self.deletions,
        }
    }
}

/// Maps `(kind, lexeme)` pairs of both sequences onto dense ids.
fn intern<'a>(a: &'a [VToken], b: &'a [VToken]) -> (Vec<u32>, Vec<u32>) {
    let mut ids: HashMap<(TokenKind, &'a str), u32> = HashMap::new();
    let mut map = |toks: &'a [VToken]| -> Vec<u32> {
        toks.iter()
            .map(|t| {
                let next = ids.len() as u32;
                *ids.entry((t.kind, t.text.as_str())).or_insert(next)
            })
            .collect()
    };
    let x = map(a);
    let y = map(b);
    (x, y)
}

/// Levenshtein distance with Myers' bit-vector recurrence in 64-bit blocks.
pub fn levenshtein<T: Eq + std::hash::Hash>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut ids: HashMap<&T, usize> = HashMap::new();
    for x in a {
        let next = ids.len();
        ids.entry(x).or_insert(next);
    }
    let m = a.len();
    let blocks = m.div_ceil(64);
    let mut peq = vec![0u64; ids.len() * blocks];
    for (i, x) in a.iter().enumerate() {
        peq[ids[x] * blocks + i / 64] |= 1 << (i % 64);
    }
    let zeros = vec![0u64; blocks];
    let mut pv = vec![!0u64; blocks];
    let mut mv = vec![0u64; blocks];
    let last_bit = 1u64 << ((m - 1) % 64);
    let mut score = m;
    for y in b {
        let eqs = match ids.get(y) {
            Some(&id) => &peq[id * blocks..(id + 1) * blocks],
            None => &zeros[..],
        };
        let mut hin: i32 = 1;
        for k in 0..blocks {
            let high = if k + 1 == blocks { last_bit } else { 1 << 63 };
            let mut eq = eqs[k];
            let (p, mm) = (pv[k], mv[k]);
            let xv = eq | mm;
            if hin < 0 {
                eq |= 1;
            }
            let xh = ((eq & p).wrapping_add(p) ^ p) | eq;
            let mut ph = mm | !(xh | p);
            let mut mh = p & xh;
            let hout = if ph & high != 0 {
                1
            } else if mh & high != 0 {
                -1
            } else {
                0
            };
            ph <<= 1;
            mh <<= 1;
            if hin < 0 {
                mh |= 1;
            } else if hin > 0 {
                ph |= 1;
            }
            pv[k] = mh | !(xv | ph);
            mv[k] = ph & xv;
            hin = hout;
        }
        score = (score as i64 + hin as i64) as usize;
    }
    score
}

/// Minimum-cost alignment. Among minimum-cost scripts the one with the most
/// matches wins; remaining ties prefer diagonal steps, then insertions.
fn align_ids(a: &[u32], b: &[u32]) -> Alignment {
    const DIAG: u8 = 0;
    const UP: u8 = 1;
    const LEFT: u8 = 2;
    let (n, m) = (a.len(), b.len());
    let w = m + 1;
    let mut dir = vec![0u8; (n + 1) * w];
    // (cost, -matches) compared lexicographically
    let mut prev: Vec<(u32, i32)> = (0..=m as u32).map(|j| (j, 0)).collect();
    let mut cur = vec![(0u32, 0i32); w];
    for j in 1..=m {
        dir[j] = LEFT;
    }
    for i in 1..=n {
        cur[0] = (i as u32, 0);
        dir[i * w] = UP;
        for j in 1..=m {
            let same = a[i - 1] == b[j - 1];
            let (pc, pm) = prev[j - 1];
            let mut best = if same { (pc, pm - 1) } else { (pc + 1, pm) };
            let mut d = DIAG;
            let up = (prev[j].0 + 1, prev[j].1);
            if up < best {
                best = up;
                d = UP;
            }
            let left = (cur[j - 1].0 + 1, cur[j - 1].1);
            if left < best {
                best = left;
                d = LEFT;
            }
            cur[j] = best;
            dir[i * w + j] = d;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        match dir[i * w + j] {
            DIAG => {
                i -= 1;
                j -= 1;
                ops.push(if a[i] == b[j] {
                    EditOp::Match { ref_idx: i, gen_idx: j }
                } else {
                    EditOp::Substitute { ref_idx: i, gen_idx: j }
                });
            }
            UP => {
                i -= 1;
                ops.push(EditOp::Insert { ref_idx: i });
            }
            _ => {
                j -= 1;
                ops.push(EditOp::Delete { gen_idx: j });
            }
        }
    }
    ops.reverse();
    Alignment { ops }
}

/// Distance and an optimal alignment between two token sequences.
pub fn token_edit_distance(reference: &[VToken], generated: &[VToken]) -> (usize, Alignment) {
    let (a, b) = intern(reference, generated);
    let alignment = align_ids(&a, &b);
    let distance = levenshtein(&a, &b);
    debug_assert_eq!(distance, alignment.cost());
    (distance, alignment)
}

pub fn score_streams(reference: &VTokenStream, generated: &VTokenStream) -> Result<ScoreReport, ScoreError> {
    if reference.is_empty() {
        return Err(ScoreError::EmptyReference);
    }
    let (_, alignment) = token_edit_distance(&reference.tokens, &generated.tokens);
    ScoreReport::from_counts(alignment.counts())
}

pub fn score_pair(reference: &str, generated: &str) -> Result<ScoreReport, ScoreError> {
    score_streams(&tokenize(reference), &tokenize(generated))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleStatus {
    Paired,
    /// In the reference only.
    Missing,
    /// In the generation only.
    Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleScore {
    pub name: String,
    pub status: ModuleStatus,
    pub counts: EditCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignScore {
    /// Sorted by module name.
    pub modules: Vec<ModuleScore>,
    pub total: ScoreReport,
}

/// Module name → tokens, over every file of one side. Tokens outside any
/// module are pooled under [`UNIT_SCOPE`].
fn collect_modules(files: &[(String, String)], side: Side) -> Result<BTreeMap<String, Vec<VToken>>, ScoreError> {
    let mut out: BTreeMap<String, Vec<VToken>> = BTreeMap::new();
    let mut unit = Vec::new();
    for (_, src) in files {
        let stream = tokenize(src);
        let chunks = module_chunks(&stream.tokens);
        let mut next = 0;
        for (k, chunk) in chunks.iter().enumerate() {
            unit.extend_from_slice(&stream.tokens[next..chunk.range.start]);
            next = chunk.range.end;
            let name = chunk
                .name
                .clone()
                .unwrap_or_else(|| format!("<unnamed:{k}>"));
            if out.contains_key(&name) {
                return Err(ScoreError::DuplicateModule { side, name });
            }
            out.insert(name, stream.tokens[chunk.range.clone()].to_vec());
        }
        unit.extend_from_slice(&stream.tokens[next..]);
    }
    if !unit.is_empty() {
        out.insert(UNIT_SCOPE.to_string(), unit);
    }
    Ok(out)
}

/// Scores a generated design against a reference, module by module.
///
/// `files` are `(label, source)` pairs; labels are informational only.
pub fn score_design(reference: &[(String, String)], generated: &[(String, String)]) -> Result<DesignScore, ScoreError> {
    let refs = collect_modules(reference, Side::Reference)?;
    let gens = collect_modules(generated, Side::Generated)?;
    let mut names: Vec<&String> = refs.keys().chain(gens.keys()).collect();
    names.sort();
    names.dedup();
    let modules: Vec<ModuleScore> = names
        .par_iter()
        .map(|&name| {
            let (status, counts) = match (refs.get(name), gens.get(name)) {
                (Some(r), Some(g)) => (ModuleStatus::Paired, token_edit_distance(r, g).1.counts()),
                (Some(r), None) => (
                    ModuleStatus::Missing,
                    EditCounts {
                        insertions: r.len(),
                        ..Default::default()
                    },
                ),
                (None, Some(g)) => (
                    ModuleStatus::Extra,
                    EditCounts {
                        deletions: g.len(),
                        ..Default::default()
                    },
                ),
                (None, None) => unreachable!("name came from one of the maps"),
            };
            ModuleScore {
                name: name.clone(),
                status,
                counts,
            }
        })
        .collect();
    let mut total = EditCounts::default();
    for m in &modules {
        total.add(&m.counts);
    }
    Ok(DesignScore {
        total: ScoreReport::from_counts(total)?,
        modules,
    })
}
