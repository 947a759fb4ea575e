//! Top-B token selection and KV cache compaction during decoding.
//!
//! Scores are column sums of attention rows: the rows belong to an
//! observation window of queries, the columns are candidate key positions.
//! Progressive decoding re-runs the selection every `interval` steps after a
//! warm-up, scoring with the newest tokens of the running sequence, and keeps
//! a sliding window of recent positions in addition to the selected ones.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    self, argmax, AttentionBackend, DenseAttention, HeadCache, KvCache, ModelError, ModelWeights,
    TokenId,
};
use crate::tensor::{self, Matrix, TensorError};

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("observation window is empty")]
    EmptyWindow,
    #[error("selection sizes {selected} and {truth} do not both equal budget {budget}")]
    SizeMismatch { selected: usize, truth: usize, budget: usize },
    #[error("invalid ids: {0}")]
    InvalidIds(String),
    #[error("invalid compression config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CompressError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionConfig {
    /// Tokens kept per head by each selection (B).
    pub budget: usize,
    /// Decode steps between re-selections (n_d).
    pub interval: usize,
    /// Steps decoded against the full cache before the first selection.
    pub warmup: usize,
    /// Trailing positions whose attention rows score candidates; also the
    /// size of the recent window every head keeps.
    pub obs_window: usize,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self { budget: 1024, interval: 16, warmup: 16, obs_window: 16 }
    }
}

impl CompressionConfig {
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        for (name, v) in [
            ("budget", self.budget),
            ("interval", self.interval),
            ("warmup", self.warmup),
            ("obs_window", self.obs_window),
        ] {
            if v == 0 {
                return Err(CompressError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.budget > max_seq_len {
            return Err(CompressError::InvalidConfig(format!(
                "budget {} exceeds max_seq_len {max_seq_len}",
                self.budget
            )));
        }
        Ok(())
    }

    /// Whether a selection runs before producing token `n_o + 1`.
    pub fn triggers_at(&self, n_o: usize) -> bool {
        n_o >= self.warmup && (n_o - self.warmup).is_multiple_of(self.interval)
    }
}

/// Retained keys and values of one head, with their global positions.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCacheHead {
    pub keys: Matrix,
    pub values: Matrix,
    pub retained_ids: Vec<usize>,
    pub full_len: usize,
}

impl KVCacheHead {
    /// Every position of a head's history.
    pub fn full(head: &HeadCache) -> Self {
        Self {
            keys: head.keys.clone(),
            values: head.values.clone(),
            retained_ids: (0..head.len()).collect(),
            full_len: head.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.retained_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained_ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.keys.rows() != self.len() || self.values.rows() != self.len() {
            return Err(CompressError::InvalidIds(format!(
                "{} ids for {} keys and {} values",
                self.len(),
                self.keys.rows(),
                self.values.rows()
            )));
        }
        if self.retained_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CompressError::InvalidIds("retained ids not strictly increasing".into()));
        }
        if self.retained_ids.last().is_some_and(|&p| p >= self.full_len) {
            return Err(CompressError::InvalidIds("retained id beyond history".into()));
        }
        Ok(())
    }

    fn push(&mut self, position: usize, key: &[f64], value: &[f64]) -> Result<()> {
        self.keys.push_row(key)?;
        self.values.push_row(value)?;
        self.retained_ids.push(position);
        self.full_len = position + 1;
        Ok(())
    }

    fn remove_position(&mut self, position: usize) {
        if let Ok(i) = self.retained_ids.binary_search(&position) {
            let keep: Vec<usize> = (0..self.len()).filter(|&j| j != i).collect();
            self.keys = self.keys.select_rows(&keep);
            self.values = self.values.select_rows(&keep);
            self.retained_ids.remove(i);
        }
    }
}

/// `score[a] = sum over window rows of rows[r][candidates[a]]`.
pub fn token_scores(rows: &Matrix, candidates: &[usize]) -> Result<Vec<f64>> {
    if rows.rows() == 0 {
        return Err(CompressError::EmptyWindow);
    }
    if let Some(&c) = candidates.iter().find(|&&c| c >= rows.cols()) {
        return Err(CompressError::InvalidIds(format!("candidate {c} beyond {} columns", rows.cols())));
    }
    Ok(candidates
        .iter()
        .map(|&c| {
            let mut s = 0.0;
            for row in rows.iter_rows() {
                s += row[c];
            }
            s
        })
        .collect())
}

/// Positions of the `budget` highest scores (all of them when `budget`
/// exceeds the count), ties going to the smaller position; ascending.
pub fn select_top_b(scores: &[f64], positions: &[usize], budget: usize) -> Vec<usize> {
    debug_assert_eq!(scores.len(), positions.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].total_cmp(&scores[a]).then_with(|| positions[a].cmp(&positions[b]))
    });
    let mut picked: Vec<usize> = order.into_iter().take(budget).map(|i| positions[i]).collect();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    /// Independent top-B per head.
    PerHead,
    /// One shared top-B on scores summed over heads.
    SummedOverHeads,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenSelection {
    Shared(Vec<usize>),
    PerHead(Vec<Vec<usize>>),
}

impl TokenSelection {
    pub fn for_head(&self, head: usize) -> &[usize] {
        match self {
            TokenSelection::Shared(ids) => ids,
            TokenSelection::PerHead(per) => &per[head],
        }
    }
}

fn sum_over_heads(scores_per_head: &[Vec<f64>]) -> Vec<f64> {
    let n = scores_per_head.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            for head in scores_per_head {
                s += head[i];
            }
            s
        })
        .collect()
}

/// Top-B selection from observation-window scores of every head.
pub fn select_top_b_obs(
    scores_per_head: &[Vec<f64>],
    positions: &[usize],
    budget: usize,
    aggregate: Aggregate,
) -> TokenSelection {
    match aggregate {
        Aggregate::PerHead => TokenSelection::PerHead(
            scores_per_head.iter().map(|s| select_top_b(s, positions, budget)).collect(),
        ),
        Aggregate::SummedOverHeads => {
            TokenSelection::Shared(select_top_b(&sum_over_heads(scores_per_head), positions, budget))
        }
    }
}

/// Top-B input positions by attention mass received from every output row,
/// summed over heads. `output_rows[h]` holds head `h`'s attention rows of the
/// output tokens over all keys; `inputs` are the candidate input positions.
pub fn ground_truth_top_b(output_rows: &[Matrix], inputs: &[usize], budget: usize) -> Result<Vec<usize>> {
    let per_head = output_rows
        .iter()
        .map(|rows| token_scores(rows, inputs))
        .collect::<Result<Vec<_>>>()?;
    Ok(select_top_b(&sum_over_heads(&per_head), inputs, budget))
}

/// `|selected ∩ truth| / budget`.
pub fn overlap_rate(selected: &[usize], truth: &[usize], budget: usize) -> Result<f64> {
    if budget == 0 || selected.len() != budget || truth.len() != budget {
        return Err(CompressError::SizeMismatch {
            selected: selected.len(),
            truth: truth.len(),
            budget,
        });
    }
    let truth: BTreeSet<usize> = truth.iter().copied().collect();
    let common = selected.iter().collect::<BTreeSet<_>>().into_iter().filter(|p| truth.contains(p)).count();
    Ok(common as f64 / budget as f64)
}

/// Keeps the retained positions plus the last `recent_window` positions of
/// the history that are present in `cache`.
pub fn compact_cache(cache: &KVCacheHead, retained: &[usize], recent_window: usize) -> Result<KVCacheHead> {
    cache.validate()?;
    let mut keep: BTreeSet<usize> = BTreeSet::new();
    for &p in retained {
        if cache.retained_ids.binary_search(&p).is_err() {
            return Err(CompressError::InvalidIds(format!("position {p} is not in the cache")));
        }
        keep.insert(p);
    }
    let window_start = cache.full_len.saturating_sub(recent_window);
    keep.extend(cache.retained_ids.iter().copied().filter(|&p| p >= window_start));
    let rows: Vec<usize> = keep
        .iter()
        .map(|p| cache.retained_ids.binary_search(p).expect("checked above"))
        .collect();
    Ok(KVCacheHead {
        keys: cache.keys.select_rows(&rows),
        values: cache.values.select_rows(&rows),
        retained_ids: keep.into_iter().collect(),
        full_len: cache.full_len,
    })
}

/// Attention rows of the last `window` positions over the whole history of
/// one head, recomputed from the stored queries.
pub fn observation_rows(head: &HeadCache, window: usize) -> Result<Matrix> {
    let len = head.len();
    let w = window.min(len);
    if w == 0 {
        return Err(CompressError::EmptyWindow);
    }
    let positions: Vec<usize> = (len - w..len).collect();
    let q = head.queries.select_rows(&positions);
    Ok(tensor::causal_attention_rows(&q, &head.keys, &positions)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionEvent {
    /// Tokens generated when the selection ran.
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub retained_ids: Vec<usize>,
    /// Share of the window's score mass held by the selected tokens.
    pub score_coverage: f64,
}

/// Attention cost of one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOps {
    /// Tokens generated before this step's token was fed.
    pub step: usize,
    /// Keys scored by each head, `[layer][head]`.
    pub keys_per_head: Vec<Vec<usize>>,
    /// Cache size of each head right after the latest compaction, if any.
    pub retained_at_event: Option<Vec<Vec<usize>>>,
}

impl StepOps {
    pub fn score_ops(&self) -> u64 {
        self.keys_per_head.iter().flatten().map(|&k| k as u64).sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct DecodeOutcome {
    pub tokens: Vec<TokenId>,
    pub events: Vec<CompressionEvent>,
    pub steps: Vec<StepOps>,
}

impl DecodeOutcome {
    pub fn score_ops(&self) -> u64 {
        self.steps.iter().map(StepOps::score_ops).sum()
    }
}

#[derive(Debug, Clone)]
struct ActiveHead {
    cache: KVCacheHead,
    selected: BTreeSet<usize>,
}

/// Decode-time attention over compacted per-head caches.
#[derive(Debug)]
struct CompressedAttention {
    heads: Vec<Vec<ActiveHead>>,
    /// Recent positions kept outside the selection; `None` keeps every new token.
    slide: Option<usize>,
    last_keys: Vec<Vec<usize>>,
}

impl CompressedAttention {
    fn retained_sizes(&self) -> Vec<Vec<usize>> {
        self.heads.iter().map(|l| l.iter().map(|h| h.cache.len()).collect()).collect()
    }
}

impl AttentionBackend for CompressedAttention {
    fn attend_layer(
        &mut self,
        layer: usize,
        queries: &[Matrix],
        heads: &[HeadCache],
        row_offset: usize,
    ) -> model::Result<Vec<Matrix>> {
        let slide = self.slide;
        let results: Vec<model::Result<(Matrix, usize)>> = self.heads[layer]
            .par_iter_mut()
            .zip(queries.par_iter().zip(heads.par_iter()))
            .map(|(active, (q, full))| {
                let mut out = Matrix::zeros(q.rows(), full.values.cols());
                let mut keys = 0;
                for r in 0..q.rows() {
                    let p = row_offset + r;
                    active
                        .cache
                        .push(p, full.keys.row(p), full.values.row(p))
                        .map_err(|e| ModelError::CacheCorrupt(e.to_string()))?;
                    if let Some(w) = slide {
                        if p >= w && !active.selected.contains(&(p - w)) {
                            active.cache.remove_position(p - w);
                        }
                    }
                    let q_row = q.select_rows(&[r]);
                    let cells = vec![(0..active.cache.len()).collect::<Vec<_>>()];
                    let (att, _) = tensor::attend_gathered(
                        &q_row,
                        &active.cache.keys,
                        &active.cache.values,
                        &cells,
                        false,
                    )?;
                    out.row_mut(r).copy_from_slice(att.output.row(0));
                    keys = active.cache.len();
                }
                Ok((out, keys))
            })
            .collect();
        let mut outputs = Vec::with_capacity(results.len());
        let mut keys = Vec::with_capacity(results.len());
        for r in results {
            let (z, k) = r?;
            outputs.push(z);
            keys.push(k);
        }
        self.last_keys[layer] = keys;
        Ok(outputs)
    }
}

/// How the cache is managed while an answer is decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum DecodePolicy {
    /// Full cache throughout.
    Dense,
    /// Per-head re-selection after warm-up and every `interval` steps.
    Progressive(CompressionConfig),
    /// A single selection from the prompt's trailing window, scores summed
    /// over the heads of each layer, before the first token is produced.
    OneShot(CompressionConfig),
}

fn select_heads(
    cache: &KvCache,
    config: &CompressionConfig,
    aggregate: Aggregate,
    step: usize,
    slide: Option<usize>,
    events: &mut Vec<CompressionEvent>,
) -> Result<CompressedAttention> {
    let len = cache.len();
    let candidates: Vec<usize> = (0..len).collect();
    let mut heads = Vec::with_capacity(cache.layers.len());
    for (l, layer) in cache.layers.iter().enumerate() {
        let scores = layer
            .par_iter()
            .map(|h| token_scores(&observation_rows(h, config.obs_window)?, &candidates))
            .collect::<Result<Vec<_>>>()?;
        let selection = select_top_b_obs(&scores, &candidates, config.budget, aggregate);
        let mut active = Vec::with_capacity(layer.len());
        for (h, head) in layer.iter().enumerate() {
            let ids = selection.for_head(h);
            let cache = compact_cache(&KVCacheHead::full(head), ids, config.obs_window)?;
            let total: f64 = scores[h].iter().sum();
            let kept: f64 = ids.iter().map(|&p| scores[h][p]).sum();
            events.push(CompressionEvent {
                step,
                layer: l,
                head: h,
                retained_ids: cache.retained_ids.clone(),
                score_coverage: if total > 0.0 { kept / total } else { 0.0 },
            });
            active.push(ActiveHead { cache, selected: ids.iter().copied().collect() });
        }
        heads.push(active);
    }
    let last_keys = heads.iter().map(|l: &Vec<ActiveHead>| vec![0; l.len()]).collect();
    Ok(CompressedAttention { heads, slide, last_keys })
}

/// Greedy decoding of up to `max_new` tokens from `logits` (the prediction
/// after the last prefilled token), stopping after `eos`. The full history
/// in `cache` is extended with every fed token; compacted caches only decide
/// which keys each step attends to.
pub fn decode(
    weights: &ModelWeights,
    cache: &mut KvCache,
    mut logits: Vec<f64>,
    policy: DecodePolicy,
    max_new: usize,
    eos: Option<TokenId>,
) -> Result<DecodeOutcome> {
    let mut outcome = DecodeOutcome::default();
    let mut compressed: Option<CompressedAttention> = None;
    let mut retained_at_event: Option<Vec<Vec<usize>>> = None;
    if let DecodePolicy::Progressive(c) | DecodePolicy::OneShot(c) = policy {
        c.validate(weights.config.max_seq_len)?;
    }
    if let DecodePolicy::OneShot(c) = policy {
        if max_new > 0 {
            let b = select_heads(cache, &c, Aggregate::SummedOverHeads, 0, None, &mut outcome.events)?;
            retained_at_event = Some(b.retained_sizes());
            compressed = Some(b);
        }
    }
    let mut n_o = 0usize;
    while n_o < max_new {
        if let DecodePolicy::Progressive(c) = policy {
            if c.triggers_at(n_o) {
                let b = select_heads(
                    cache,
                    &c,
                    Aggregate::PerHead,
                    n_o,
                    Some(c.obs_window),
                    &mut outcome.events,
                )?;
                retained_at_event = Some(b.retained_sizes());
                compressed = Some(b);
            }
        }
        let tok = argmax(&logits);
        outcome.tokens.push(tok);
        n_o += 1;
        if Some(tok) == eos || n_o == max_new {
            break;
        }
        let keys_per_head = match compressed.as_mut() {
            Some(backend) => {
                logits = model::extend(weights, cache, &[tok], backend)?;
                backend.last_keys.clone()
            }
            None => {
                logits = model::extend(weights, cache, &[tok], &mut DenseAttention::default())?;
                vec![vec![cache.len(); weights.config.n_heads]; weights.config.n_layers]
            }
        };
        outcome.steps.push(StepOps {
            step: n_o,
            keys_per_head,
            retained_at_event: retained_at_event.clone(),
        });
    }
    Ok(outcome)
}

/// Progressive decoding with per-head re-selection.
pub fn progressive_decode(
    weights: &ModelWeights,
    cache: &mut KvCache,
    logits: Vec<f64>,
    config: &CompressionConfig,
    max_new: usize,
    eos: Option<TokenId>,
) -> Result<DecodeOutcome> {
    decode(weights, cache, logits, DecodePolicy::Progressive(*config), max_new, eos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_row_scores() {
        let rows = Matrix::from_rows(&[[0.1, 0.5, 0.3, 0.1]]).unwrap();
        assert_eq!(token_scores(&rows, &[0, 1, 2, 3]).unwrap(), vec![0.1, 0.5, 0.3, 0.1]);
        let twice = Matrix::from_rows(&[[0.1, 0.5, 0.3, 0.1], [0.1, 0.5, 0.3, 0.1]]).unwrap();
        assert_eq!(token_scores(&twice, &[1, 3]).unwrap(), vec![1.0, 0.2]);
        assert!(matches!(token_scores(&Matrix::zeros(0, 4), &[0]), Err(CompressError::EmptyWindow)));
    }

    #[test]
    fn top_b_rules() {
        assert_eq!(select_top_b(&[0.1, 0.5, 0.3, 0.1], &[0, 1, 2, 3], 2), vec![1, 2]);
        assert_eq!(select_top_b(&[0.5, 0.5], &[0, 1], 1), vec![0]);
        assert_eq!(select_top_b(&[0.2, 0.1, 0.4], &[0, 1, 2], 10), vec![0, 1, 2]);
    }

    #[test]
    fn overlap_rules() {
        assert_eq!(overlap_rate(&[1, 2], &[2, 3], 2).unwrap(), 0.5);
        assert_eq!(overlap_rate(&[1, 2], &[1, 2], 2).unwrap(), 1.0);
        assert_eq!(overlap_rate(&[0, 1], &[2, 3], 2).unwrap(), 0.0);
        assert!(matches!(overlap_rate(&[1], &[2, 3], 2), Err(CompressError::SizeMismatch { .. })));
    }

    fn toy_cache(n: usize) -> KVCacheHead {
        let keys = Matrix::from_vec(n, 2, (0..2 * n).map(|v| v as f64).collect()).unwrap();
        let values = Matrix::from_vec(n, 1, (0..n).map(|v| 10.0 * v as f64).collect()).unwrap();
        KVCacheHead { keys, values, retained_ids: (0..n).collect(), full_len: n }
    }

    #[test]
    fn compaction() {
        let cache = toy_cache(6);
        assert_eq!(compact_cache(&cache, &(0..6).collect::<Vec<_>>(), 0).unwrap(), cache);
        let window_only = compact_cache(&cache, &[], 2).unwrap();
        assert_eq!(window_only.retained_ids, vec![4, 5]);
        let mixed = compact_cache(&cache, &[1, 4], 1).unwrap();
        assert_eq!(mixed.retained_ids, vec![1, 4, 5]);
        for (i, &p) in mixed.retained_ids.iter().enumerate() {
            assert_eq!(mixed.keys.row(i), cache.keys.row(p));
            assert_eq!(mixed.values.row(i), cache.values.row(p));
        }
        assert_eq!(mixed.full_len, 6);
        assert!(matches!(compact_cache(&mixed, &[2], 0), Err(CompressError::InvalidIds(_))));
    }

    #[test]
    fn trigger_schedule() {
        let c = CompressionConfig { budget: 4, interval: 3, warmup: 5, obs_window: 3 };
        let fired: Vec<usize> = (0..15).filter(|&n| c.triggers_at(n)).collect();
        assert_eq!(fired, vec![5, 8, 11, 14]);
        assert!(CompressionConfig { interval: 0, ..c }.validate(100).is_err());
        assert!(CompressionConfig { budget: 101, ..c }.validate(100).is_err());
    }

    #[test]
    fn summed_selection_shares_ids() {
        let scores = vec![vec![0.9, 0.0, 0.1], vec![0.0, 0.6, 0.4]];
        let per = select_top_b_obs(&scores, &[0, 1, 2], 1, Aggregate::PerHead);
        assert_eq!(per, TokenSelection::PerHead(vec![vec![0], vec![1]]));
        let shared = select_top_b_obs(&scores, &[0, 1, 2], 1, Aggregate::SummedOverHeads);
        assert_eq!(shared, TokenSelection::Shared(vec![0]));
    }
}
