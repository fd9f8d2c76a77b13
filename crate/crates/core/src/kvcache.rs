//! Key/value cache with dense, sliding-window and attention-sink eviction.
//!
//! Keys are stored without rotary encoding. Window and Sink caches hand out
//! cache-relative positions (slot index), so a key's rotation changes as
//! older entries are evicted; rotation is therefore applied inside
//! [`KvCache::attend`], never at insertion time.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, softmax_in_place, RopeTable, ROPE_BASE};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("window length must be at least 1")]
    EmptyWindow,
    #[error("sink cache needs a recent segment of at least 1 entry")]
    EmptyRecent,
    #[error("position {got} is not after the last stored position {last}")]
    NonMonotonePosition { last: usize, got: usize },
    #[error("key/value width {got} does not match cache width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("head width {0} must be even for rotary encoding")]
    OddWidth(usize),
    #[error("attention over an empty cache")]
    Empty,
    #[error("query position {query} precedes cache position {cached}")]
    QueryBeforeCache { query: usize, cached: usize },
    #[error("caches disagree on policy: {first} vs {other}")]
    PolicyMismatch { first: CachePolicy, other: CachePolicy },
    #[error("cannot parse cache policy {0:?}; expected dense, window:W or sink:S,R")]
    Parse(String),
}

/// Eviction rule applied after every append.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CachePolicy {
    Dense,
    Window { window_len: usize },
    Sink { sink_len: usize, recent_len: usize },
}

impl CachePolicy {
    pub fn window(window_len: usize) -> Result<Self, CacheError> {
        if window_len == 0 {
            return Err(CacheError::EmptyWindow);
        }
        Ok(Self::Window { window_len })
    }

    pub fn sink(sink_len: usize, recent_len: usize) -> Result<Self, CacheError> {
        if recent_len == 0 {
            return Err(CacheError::EmptyRecent);
        }
        Ok(Self::Sink {
            sink_len,
            recent_len,
        })
    }

    /// Maximum number of retained entries; `None` for Dense.
    pub fn capacity(&self) -> Option<usize> {
        match *self {
            Self::Dense => None,
            Self::Window { window_len } => Some(window_len),
            Self::Sink {
                sink_len,
                recent_len,
            } => Some(sink_len + recent_len),
        }
    }

    fn validate(&self) -> Result<(), CacheError> {
        match *self {
            Self::Dense => Ok(()),
            Self::Window { window_len } => Self::window(window_len).map(drop),
            Self::Sink {
                sink_len,
                recent_len,
            } => Self::sink(sink_len, recent_len).map(drop),
        }
    }
}

impl fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Dense => write!(f, "dense"),
            Self::Window { window_len } => write!(f, "window:{window_len}"),
            Self::Sink {
                sink_len,
                recent_len,
            } => write!(f, "sink:{sink_len},{recent_len}"),
        }
    }
}

impl FromStr for CachePolicy {
    type Err = CacheError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CacheError::Parse(s.to_string());
        let s = s.trim();
        if s.eq_ignore_ascii_case("dense") {
            return Ok(Self::Dense);
        }
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        match kind.to_ascii_lowercase().as_str() {
            "window" => Self::window(args.trim().parse().map_err(|_| bad())?),
            "sink" => {
                let (a, b) = args.split_once(',').ok_or_else(bad)?;
                Self::sink(
                    a.trim().parse().map_err(|_| bad())?,
                    b.trim().parse().map_err(|_| bad())?,
                )
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub original_pos: usize,
}

/// One head's key/value store.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    policy: CachePolicy,
    width: Option<usize>,
    entries: Vec<CacheEntry>,
}

impl KvCache {
    pub fn new(policy: CachePolicy) -> Result<Self, CacheError> {
        policy.validate()?;
        Ok(Self {
            policy,
            width: None,
            entries: Vec::new(),
        })
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    /// Stores an entry and applies the eviction rule.
    pub fn append(
        &mut self,
        key: Vec<f64>,
        value: Vec<f64>,
        original_pos: usize,
    ) -> Result<(), CacheError> {
        if let Some(last) = self.entries.last() {
            if original_pos <= last.original_pos {
                return Err(CacheError::NonMonotonePosition {
                    last: last.original_pos,
                    got: original_pos,
                });
            }
        }
        let width = *self.width.get_or_insert(key.len());
        for got in [key.len(), value.len()] {
            if got != width {
                return Err(CacheError::WidthMismatch {
                    expected: width,
                    got,
                });
            }
        }
        self.entries.push(CacheEntry {
            key,
            value,
            original_pos,
        });
        self.evict();
        Ok(())
    }

    fn evict(&mut self) {
        match self.policy {
            CachePolicy::Dense => {}
            CachePolicy::Window { window_len } => {
                if self.entries.len() > window_len {
                    let excess = self.entries.len() - window_len;
                    self.entries.drain(..excess);
                }
            }
            CachePolicy::Sink {
                sink_len,
                recent_len,
            } => {
                let cap = sink_len + recent_len;
                if self.entries.len() > cap {
                    let excess = self.entries.len() - cap;
                    self.entries.drain(sink_len..sink_len + excess);
                }
            }
        }
    }

    /// Positions used for rotary encoding, one per stored entry.
    pub fn cache_positions(&self) -> Vec<usize> {
        (0..self.entries.len())
            .map(|slot| self.position_of(slot))
            .collect()
    }

    fn position_of(&self, slot: usize) -> usize {
        match self.policy {
            CachePolicy::Dense => self.entries[slot].original_pos,
            _ => slot,
        }
    }

    /// Position of the most recently appended entry.
    pub fn last_position(&self) -> Option<usize> {
        self.entries.len().checked_sub(1).map(|s| self.position_of(s))
    }

    pub fn retained_original_positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.original_pos).collect()
    }

    /// Scaled dot-product attention of one query over the cache, with rotary
    /// encoding at the default base.
    pub fn attend(&self, query: &[f64], query_cache_pos: usize) -> Result<Vec<f64>, CacheError> {
        let mut rope =
            RopeTable::new(query.len(), ROPE_BASE).map_err(|_| CacheError::OddWidth(query.len()))?;
        self.attend_with(query, query_cache_pos, &mut rope)
    }

    /// Same as [`attend`](Self::attend) with a caller-owned rotary table.
    pub fn attend_with(
        &self,
        query: &[f64],
        query_cache_pos: usize,
        rope: &mut RopeTable,
    ) -> Result<Vec<f64>, CacheError> {
        let mut scratch = AttendScratch::default();
        let mut out = vec![0.0; query.len()];
        self.attend_into(query, query_cache_pos, rope, &mut scratch, &mut out)?;
        Ok(out)
    }

    /// Allocation-free attention used by the decoder's hot loop.
    pub(crate) fn attend_into(
        &self,
        query: &[f64],
        query_cache_pos: usize,
        rope: &mut RopeTable,
        scratch: &mut AttendScratch,
        out: &mut [f64],
    ) -> Result<(), CacheError> {
        let last = self.last_position().ok_or(CacheError::Empty)?;
        if query_cache_pos < last {
            return Err(CacheError::QueryBeforeCache {
                query: query_cache_pos,
                cached: last,
            });
        }
        let d = query.len();
        if Some(d) != self.width {
            return Err(CacheError::WidthMismatch {
                expected: self.width.unwrap_or(0),
                got: d,
            });
        }
        rope.ensure(query_cache_pos + 1);
        scratch.q.resize(d, 0.0);
        scratch.k.resize(d, 0.0);
        rope.rotate_into(query, query_cache_pos, &mut scratch.q);
        let scale = 1.0 / (d as f64).sqrt();
        scratch.scores.clear();
        for (slot, entry) in self.entries.iter().enumerate() {
            rope.rotate_into(&entry.key, self.position_of(slot), &mut scratch.k);
            scratch.scores.push(dot(&scratch.q, &scratch.k) * scale);
        }
        softmax_in_place(&mut scratch.scores);
        out.fill(0.0);
        for (p, entry) in scratch.scores.iter().zip(&self.entries) {
            for (o, v) in out.iter_mut().zip(&entry.value) {
                *o += p * v;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub(crate) struct AttendScratch {
    q: Vec<f64>,
    k: Vec<f64>,
    scores: Vec<f64>,
}

/// Caches for every (layer, head) of a model, evicted in lockstep.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheSet {
    policy: CachePolicy,
    n_layers: usize,
    n_heads: usize,
    caches: Vec<KvCache>,
}

impl CacheSet {
    pub fn new(policy: CachePolicy, n_layers: usize, n_heads: usize) -> Result<Self, CacheError> {
        let cache = KvCache::new(policy)?;
        Ok(Self {
            policy,
            n_layers,
            n_heads,
            caches: vec![cache; n_layers * n_heads],
        })
    }

    /// Assembles a set from per-(layer, head) caches in layer-major order.
    /// All caches must share one policy.
    pub fn from_caches(
        caches: Vec<KvCache>,
        n_layers: usize,
        n_heads: usize,
    ) -> Result<Self, CacheError> {
        let first = caches.first().ok_or(CacheError::Empty)?.policy;
        if let Some(other) = caches.iter().map(|c| c.policy).find(|p| *p != first) {
            return Err(CacheError::PolicyMismatch { first, other });
        }
        assert_eq!(caches.len(), n_layers * n_heads, "cache count vs layout");
        Ok(Self {
            policy: first,
            n_layers,
            n_heads,
            caches,
        })
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn get(&self, layer: usize, head: usize) -> &KvCache {
        &self.caches[layer * self.n_heads + head]
    }

    pub fn get_mut(&mut self, layer: usize, head: usize) -> &mut KvCache {
        &mut self.caches[layer * self.n_heads + head]
    }

    /// Retained original positions; identical across all member caches.
    pub fn retained_original_positions(&self) -> Vec<usize> {
        self.caches
            .first()
            .map(KvCache::retained_original_positions)
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.caches.first().map_or(0, KvCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn filled(policy: CachePolicy, n: usize) -> KvCache {
        let mut c = KvCache::new(policy).unwrap();
        for p in 0..n {
            c.append(vec![p as f64, 0.0], vec![0.0, p as f64], p).unwrap();
        }
        c
    }

    #[test]
    fn retention_examples() {
        let sink = filled(CachePolicy::sink(4, 4).unwrap(), 12);
        assert_eq!(
            sink.retained_original_positions(),
            vec![0, 1, 2, 3, 8, 9, 10, 11]
        );
        assert_eq!(sink.cache_positions(), (0..8).collect::<Vec<_>>());

        let dense = filled(CachePolicy::Dense, 12);
        assert_eq!(dense.retained_original_positions(), (0..12).collect::<Vec<_>>());
        assert_eq!(filled(CachePolicy::Dense, 5).cache_positions(), vec![0, 1, 2, 3, 4]);

        let window = filled(CachePolicy::window(8).unwrap(), 12);
        assert_eq!(window.retained_original_positions(), (4..12).collect::<Vec<_>>());
        assert_eq!(window.cache_positions(), (0..8).collect::<Vec<_>>());

        assert_eq!(
            filled(CachePolicy::sink(2, 2).unwrap(), 6).retained_original_positions(),
            vec![0, 1, 4, 5]
        );
        assert!(KvCache::new(CachePolicy::Dense)
            .unwrap()
            .retained_original_positions()
            .is_empty());
        assert_eq!(
            filled(CachePolicy::window(3).unwrap(), 7).retained_original_positions(),
            vec![4, 5, 6]
        );
    }

    #[test]
    fn dense_positions_follow_original_positions() {
        let mut c = KvCache::new(CachePolicy::Dense).unwrap();
        for p in [2, 5, 9] {
            c.append(vec![0.0; 2], vec![0.0; 2], p).unwrap();
        }
        assert_eq!(c.cache_positions(), vec![2, 5, 9]);
    }

    #[test]
    fn append_rejects_non_monotone_positions() {
        let mut c = filled(CachePolicy::Dense, 3);
        assert_eq!(
            c.append(vec![0.0; 2], vec![0.0; 2], 2),
            Err(CacheError::NonMonotonePosition { last: 2, got: 2 })
        );
        assert!(matches!(
            c.append(vec![0.0; 3], vec![0.0; 2], 7),
            Err(CacheError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn policy_validation() {
        assert_eq!(CachePolicy::window(0), Err(CacheError::EmptyWindow));
        assert_eq!(CachePolicy::sink(4, 0), Err(CacheError::EmptyRecent));
        assert!(CachePolicy::sink(0, 3).is_ok());
        assert!(KvCache::new(CachePolicy::Window { window_len: 0 }).is_err());
    }

    #[test]
    fn policy_round_trips_through_text() {
        for p in [
            CachePolicy::Dense,
            CachePolicy::window(64).unwrap(),
            CachePolicy::sink(4, 60).unwrap(),
        ] {
            assert_eq!(p.to_string().parse::<CachePolicy>().unwrap(), p);
        }
        assert!("sink:4".parse::<CachePolicy>().is_err());
        assert!("ring:3".parse::<CachePolicy>().is_err());
    }

    #[test]
    fn attend_single_entry_returns_value() {
        let mut c = KvCache::new(CachePolicy::Dense).unwrap();
        c.append(vec![0.3, -0.7, 1.1, 0.2], vec![1.5, -2.5, 0.25, 4.0], 0)
            .unwrap();
        let out = c.attend(&[0.9, 0.1, -0.4, 0.6], 0).unwrap();
        assert_eq!(out, vec![1.5, -2.5, 0.25, 4.0]);
    }

    #[test]
    fn attend_equal_scores_average_values() {
        let mut c = KvCache::new(CachePolicy::window(3).unwrap()).unwrap();
        let values = [[1.0, 2.0], [3.0, -4.0], [5.0, 8.0], [-1.0, 0.5]];
        for (p, v) in values.iter().enumerate() {
            c.append(vec![1.0, 0.0], v.to_vec(), p).unwrap();
        }
        let out = c.attend(&[0.0, 0.0], 2).unwrap();
        let mean0 = (3.0 + 5.0 - 1.0) / 3.0;
        let mean1 = (-4.0 + 8.0 + 0.5) / 3.0;
        assert!((out[0] - mean0).abs() < 1e-15 && (out[1] - mean1).abs() < 1e-15);
    }

    #[test]
    fn attend_errors() {
        let c = KvCache::new(CachePolicy::Dense).unwrap();
        assert_eq!(c.attend(&[0.0, 0.0], 0), Err(CacheError::Empty));
        let c = filled(CachePolicy::Dense, 4);
        assert!(matches!(
            c.attend(&[0.0, 0.0], 1),
            Err(CacheError::QueryBeforeCache { query: 1, cached: 3 })
        ));
    }

    /// Independent reference: rotate, score, normalize and mix with no shared
    /// helpers beyond `rope_apply`.
    fn reference_attention(query: &[f64], qpos: usize, keys: &[(Vec<f64>, Vec<f64>, usize)]) -> Vec<f64> {
        use crate::numerics::rope_apply;
        let d = query.len();
        let q = rope_apply(query, qpos, ROPE_BASE).unwrap();
        let scores: Vec<f64> = keys
            .iter()
            .map(|(k, _, pos)| {
                let k = rope_apply(k, *pos, ROPE_BASE).unwrap();
                q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::MIN, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut out = vec![0.0; d];
        for (wi, (_, v, _)) in w.iter().zip(keys) {
            for j in 0..d {
                out[j] += wi / z * v[j];
            }
        }
        out
    }

    #[test]
    fn attend_matches_reference_over_retained_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..300 {
            let d = 2 * rng.random_range(1..5);
            let policy = match trial % 3 {
                0 => CachePolicy::Dense,
                1 => CachePolicy::window(rng.random_range(1..6)).unwrap(),
                _ => CachePolicy::sink(rng.random_range(0..4), rng.random_range(1..5)).unwrap(),
            };
            let n = rng.random_range(1..20);
            let mut cache = KvCache::new(policy).unwrap();
            let mut all = Vec::new();
            for p in 0..n {
                let k: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                cache.append(k.clone(), v.clone(), p).unwrap();
                all.push((k, v));
            }
            let retained = cache.retained_original_positions();
            let relative = !matches!(policy, CachePolicy::Dense);
            let subset: Vec<_> = retained
                .iter()
                .enumerate()
                .map(|(slot, &orig)| {
                    let pos = if relative { slot } else { orig };
                    (all[orig].0.clone(), all[orig].1.clone(), pos)
                })
                .collect();
            let qpos = subset.last().unwrap().2;
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = cache.attend(&q, qpos).unwrap();
            let want = reference_attention(&q, qpos, &subset);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cache_set_rejects_mixed_policies() {
        let a = KvCache::new(CachePolicy::Dense).unwrap();
        let b = KvCache::new(CachePolicy::window(4).unwrap()).unwrap();
        assert!(matches!(
            CacheSet::from_caches(vec![a.clone(), b], 2, 1),
            Err(CacheError::PolicyMismatch { .. })
        ));
        assert!(CacheSet::from_caches(vec![a.clone(), a], 2, 1).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn expected(policy: CachePolicy, n: usize) -> Vec<usize> {
            match policy {
                CachePolicy::Dense => (0..n).collect(),
                CachePolicy::Window { window_len } => (n.saturating_sub(window_len)..n).collect(),
                CachePolicy::Sink { sink_len, recent_len } => {
                    let head = 0..n.min(sink_len);
                    let tail_len = n.saturating_sub(sink_len).min(recent_len);
                    head.chain(n - tail_len..n).collect()
                }
            }
        }

        fn any_policy() -> impl Strategy<Value = CachePolicy> {
            prop_oneof![
                Just(CachePolicy::Dense),
                (1usize..20).prop_map(|w| CachePolicy::Window { window_len: w }),
                (0usize..10, 1usize..10).prop_map(|(s, r)| CachePolicy::Sink { sink_len: s, recent_len: r }),
            ]
        }

        proptest! {
            #[test]
            fn retention_follows_closed_form(policy in any_policy(), n in 0usize..80) {
                let c = filled(policy, n);
                prop_assert_eq!(c.retained_original_positions(), expected(policy, n));
                if let Some(cap) = policy.capacity() {
                    prop_assert!(c.len() <= cap);
                }
            }

            #[test]
            fn capacity_holds_after_every_append(policy in any_policy(), n in 1usize..60) {
                let mut c = KvCache::new(policy).unwrap();
                for p in 0..n {
                    c.append(vec![0.0; 2], vec![0.0; 2], p * 3 + 1).unwrap();
                    if let Some(cap) = policy.capacity() {
                        prop_assert!(c.len() <= cap);
                    }
                    let kept = c.retained_original_positions();
                    prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
                }
                prop_assert_eq!(filled(policy, n), filled(policy, n));
            }
        }
    }
}
