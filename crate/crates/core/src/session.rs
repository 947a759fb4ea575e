//! Multi-turn sessions: each turn prefills the previous answer plus the new
//! input against the cached history, then decodes an answer.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{DialogueInstance, Vocab};
use crate::compress::{self, CompressError, CompressionConfig, CompressionEvent, DecodePolicy};
use crate::metrics::{MetricError, MetricsRecord, TurnScore};
use crate::model::{
    self, AttentionBackend, DenseAttention, HeadCache, KvCache, ModelError, ModelWeights, TokenId,
};
use crate::sparsify::{self, HeadPlan};
use crate::tensor::{self, Matrix};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("instance has no turns")]
    NoTurns,
    #[error("turn input is empty")]
    EmptyInput,
    #[error("history of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, SessionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Full attention in both phases.
    Dense,
    /// Line-sparse prefill and progressive per-head compression.
    Sparse,
    /// Full prefill, then one shared selection from the prompt's last tokens.
    ObswindowBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionParams {
    pub mode: Mode,
    pub alpha: f64,
    pub compression: CompressionConfig,
    pub sample_rate: f64,
    pub sample_floor: usize,
    pub max_new: usize,
    pub eos: Option<TokenId>,
    pub seed: u64,
    /// Record wall-clock times; off by default so transcripts are byte-stable.
    pub timings: bool,
}

impl Default for SessionParams {
    fn default() -> Self {
        Self {
            mode: Mode::Sparse,
            alpha: 0.955,
            compression: CompressionConfig::default(),
            sample_rate: 0.1,
            sample_floor: 32,
            max_new: 32,
            eos: None,
            seed: 0,
            timings: false,
        }
    }
}

impl SessionParams {
    /// Full-coverage prefill and a budget covering any history.
    pub fn lossless(mut self, max_seq_len: usize) -> Self {
        self.alpha = 1.0;
        self.compression.budget = max_seq_len;
        self
    }

    pub fn validate(&self, weights: &ModelWeights) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SessionError::InvalidParams(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) || self.sample_floor == 0 {
            return Err(SessionError::InvalidParams("sample rate must be in (0, 1], floor ≥ 1".into()));
        }
        if self.mode != Mode::Dense {
            self.compression.validate(weights.config.max_seq_len)?;
        }
        Ok(())
    }
}

/// Selected lines of one head in one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub turn: usize,
    pub layer: usize,
    pub head: usize,
    pub plan: HeadPlan,
}

#[derive(Debug, Clone)]
pub struct SessionState {
    /// Every token seen so far: inputs and answers, in order.
    pub history: Vec<TokenId>,
    /// Keys, values and queries of every prefilled token. The latest answer
    /// is held back until the next turn prefills it with that turn's input.
    pub cache: KvCache,
    pub pending_answer: Vec<TokenId>,
    pub plans: Vec<PlanRecord>,
    /// Completed turns.
    pub turn_index: usize,
    pub seed: u64,
}

impl SessionState {
    pub fn new(weights: &ModelWeights, seed: u64) -> Self {
        Self {
            history: Vec::new(),
            cache: KvCache::new(&weights.config),
            pending_answer: Vec::new(),
            plans: Vec::new(),
            turn_index: 0,
            seed,
        }
    }

    pub fn check(&self) -> std::result::Result<(), String> {
        if self.history.len() != self.cache.len() + self.pending_answer.len() {
            return Err(format!(
                "history {} != cache {} + pending {}",
                self.history.len(),
                self.cache.len(),
                self.pending_answer.len()
            ));
        }
        Ok(())
    }
}

/// Seed of head `(layer, head)` in `turn`, mixed SplitMix64-style.
pub fn head_seed(seed: u64, turn: usize, layer: usize, head: usize) -> u64 {
    let mut z = seed;
    for v in [turn as u64, layer as u64, head as u64] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Prefill backend that selects lines per head on sampled rows and attends
/// only to the selected cells.
#[derive(Debug)]
pub struct SparsePrefill {
    pub alpha: f64,
    pub sample_rate: f64,
    pub sample_floor: usize,
    pub seed: u64,
    pub turn: usize,
    /// `[layer][head]` plans of the latest call.
    pub plans: Vec<Vec<HeadPlan>>,
    pub score_ops: u64,
}

impl SparsePrefill {
    pub fn new(params: &SessionParams, seed: u64, turn: usize) -> Self {
        Self {
            alpha: params.alpha,
            sample_rate: params.sample_rate,
            sample_floor: params.sample_floor,
            seed,
            turn,
            plans: Vec::new(),
            score_ops: 0,
        }
    }

    fn sparsify(&self, layer: usize, head: usize, q: &Matrix, h: &HeadCache, row_offset: usize) -> model::Result<(Matrix, HeadPlan, u64)> {
        let n_new = q.rows();
        let local: Vec<usize> = if self.alpha >= 1.0 {
            (0..n_new).collect()
        } else {
            sparsify::sample_rows(
                n_new,
                self.sample_rate,
                self.sample_floor,
                head_seed(self.seed, self.turn, layer, head),
            )?
        };
        let positions: Vec<usize> = local.iter().map(|r| r + row_offset).collect();
        let sp = sparsify::sparsify_head(&q.select_rows(&local), &h.keys, &positions, n_new, self.alpha)?;
        let att = tensor::masked_sparse_attention(q, &h.keys, &h.values, &sp.plan, row_offset)?;
        Ok((att.output, sp.plan, sp.score_ops + att.score_ops))
    }
}

impl AttentionBackend for SparsePrefill {
    fn attend_layer(
        &mut self,
        layer: usize,
        queries: &[Matrix],
        heads: &[HeadCache],
        row_offset: usize,
    ) -> model::Result<Vec<Matrix>> {
        let this = &*self;
        let results: Vec<model::Result<(Matrix, HeadPlan, u64)>> = queries
            .par_iter()
            .zip(heads.par_iter())
            .enumerate()
            .map(|(h, (q, cache))| this.sparsify(layer, h, q, cache, row_offset))
            .collect();
        if layer == 0 {
            self.plans.clear();
        }
        let mut outputs = Vec::with_capacity(results.len());
        let mut plans = Vec::with_capacity(results.len());
        for r in results {
            let (z, plan, ops) = r?;
            self.score_ops += ops;
            outputs.push(z);
            plans.push(plan);
        }
        self.plans.push(plans);
        Ok(outputs)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub heads: usize,
    pub mean_lines: f64,
    pub mean_slashes: f64,
    pub mean_verticals: f64,
    pub mean_coverage: f64,
    pub min_coverage: f64,
    /// Selected cells over causal cells of the prefilled block, all heads.
    pub cell_fraction: f64,
}

impl PlanStats {
    pub fn from_plans(plans: &[&HeadPlan]) -> Self {
        if plans.is_empty() {
            return Self::default();
        }
        let n = plans.len() as f64;
        let mean = |f: &dyn Fn(&HeadPlan) -> f64| plans.iter().map(|p| f(p)).sum::<f64>() / n;
        let causal: usize = plans
            .iter()
            .map(|p| p.n_new * p.row_offset() + p.n_new * (p.n_new + 1) / 2)
            .sum();
        let cells: usize = plans.iter().map(|p| p.cell_count()).sum();
        Self {
            heads: plans.len(),
            mean_lines: mean(&|p| p.line_count() as f64),
            mean_slashes: mean(&|p| p.slashes.len() as f64),
            mean_verticals: mean(&|p| p.verticals.len() as f64),
            mean_coverage: mean(&|p| p.coverage),
            min_coverage: plans.iter().map(|p| p.coverage).fold(f64::INFINITY, f64::min),
            cell_fraction: if causal > 0 { cells as f64 / causal as f64 } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub prefill_score_ops: u64,
    pub decode_score_ops: u64,
    pub compression_events: usize,
}

#[derive(Debug, Clone)]
pub struct TurnOutput {
    pub answer: Vec<TokenId>,
    pub plan_stats: PlanStats,
    pub op_counts: OpCounts,
    pub events: Vec<CompressionEvent>,
    pub decode: compress::DecodeOutcome,
    pub wall_ms: f64,
}

/// One turn: prefill `[previous answer, new_input]`, decode, and hold the
/// answer back for the next turn's prefill.
pub fn run_turn(
    weights: &ModelWeights,
    session: &mut SessionState,
    new_input: &[TokenId],
    params: &SessionParams,
) -> Result<TurnOutput> {
    if new_input.is_empty() {
        return Err(SessionError::EmptyInput);
    }
    let started = Instant::now();
    let turn = session.turn_index + 1;
    let mut block: Vec<TokenId> = std::mem::take(&mut session.pending_answer);
    block.extend_from_slice(new_input);
    let max = weights.config.max_seq_len;
    if session.cache.len() + block.len() > max {
        let len = session.cache.len() + block.len();
        session.pending_answer = block[..block.len() - new_input.len()].to_vec();
        return Err(SessionError::SequenceTooLong { len, max });
    }
    if let Err(e) = params.validate(weights) {
        session.pending_answer = block[..block.len() - new_input.len()].to_vec();
        return Err(e);
    }
    session.history.extend_from_slice(new_input);

    let (logits, plan_stats, prefill_ops) = match params.mode {
        Mode::Sparse => {
            let mut backend = SparsePrefill::new(params, session.seed, turn);
            let logits = model::extend(weights, &mut session.cache, &block, &mut backend)?;
            for (l, layer) in backend.plans.iter().enumerate() {
                for (h, plan) in layer.iter().enumerate() {
                    session.plans.push(PlanRecord { turn, layer: l, head: h, plan: plan.clone() });
                }
            }
            let all: Vec<&HeadPlan> = backend.plans.iter().flatten().collect();
            (logits, PlanStats::from_plans(&all), backend.score_ops)
        }
        Mode::Dense | Mode::ObswindowBaseline => {
            let mut backend = DenseAttention::default();
            let logits = model::extend(weights, &mut session.cache, &block, &mut backend)?;
            (logits, PlanStats::default(), backend.score_ops)
        }
    };

    let prefilled = session.cache.len();
    let room = max - prefilled;
    let policy = match params.mode {
        Mode::Dense => DecodePolicy::Dense,
        Mode::Sparse => DecodePolicy::Progressive(params.compression),
        Mode::ObswindowBaseline => DecodePolicy::OneShot(params.compression),
    };
    // The last answer token is never fed, so `room + 1` tokens fit.
    let max_new = params.max_new.min(room + 1);
    let outcome = compress::decode(weights, &mut session.cache, logits, policy, max_new, params.eos)?;
    session.cache.truncate(prefilled);
    session.history.extend_from_slice(&outcome.tokens);
    session.pending_answer = outcome.tokens.clone();
    session.turn_index = turn;

    let op_counts = OpCounts {
        prefill_score_ops: prefill_ops,
        decode_score_ops: outcome.score_ops(),
        compression_events: outcome.events.len(),
    };
    Ok(TurnOutput {
        answer: outcome.tokens.clone(),
        plan_stats,
        op_counts,
        events: outcome.events.clone(),
        decode: outcome,
        wall_ms: if params.timings { started.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTranscript {
    pub input_tokens: Vec<TokenId>,
    pub answer_tokens: Vec<TokenId>,
    pub reference_tokens: Vec<TokenId>,
    pub plan_stats: PlanStats,
    pub op_counts: OpCounts,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub instance_id: String,
    pub mode: Mode,
    pub task: crate::bench::TaskKind,
    pub eos: Option<TokenId>,
    pub turns: Vec<TurnTranscript>,
}

impl Transcript {
    /// Task score of every turn, answers stripped of a trailing eos.
    pub fn metrics(&self) -> Result<MetricsRecord> {
        let eos = self.eos;
        let metric = self.task.metric();
        let mut record = MetricsRecord::new(self.instance_id.clone());
        for (i, t) in self.turns.iter().enumerate() {
            let mut answer: &[TokenId] = &t.answer_tokens;
            if let (Some(e), Some(&last)) = (eos, answer.last()) {
                if e == last {
                    answer = &answer[..answer.len() - 1];
                }
            }
            record.turn_scores.push(TurnScore {
                turn: i + 1,
                metric,
                score: metric.score(answer, &t.reference_tokens)?,
            });
            record.op_counts.entry("prefill_score_ops".into()).or_default().push(t.op_counts.prefill_score_ops);
            record.op_counts.entry("decode_score_ops".into()).or_default().push(t.op_counts.decode_score_ops);
            record.wall_ms.push(t.wall_ms);
        }
        Ok(record)
    }
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub transcript: Transcript,
    pub metrics: MetricsRecord,
    pub events: Vec<(usize, CompressionEvent)>,
    pub plans: Vec<PlanRecord>,
}

/// Runs every turn of `instance` under `params.mode`.
pub fn run_session(
    weights: &ModelWeights,
    instance: &DialogueInstance,
    vocab: &Vocab,
    params: &SessionParams,
) -> Result<SessionOutcome> {
    if instance.turns.is_empty() {
        return Err(SessionError::NoTurns);
    }
    let mut session = SessionState::new(weights, params.seed);
    let mut turns = Vec::with_capacity(instance.turns.len());
    let mut events = Vec::new();
    for turn in &instance.turns {
        let input = vocab.tokenize(&turn.prompt_text());
        let out = run_turn(weights, &mut session, &input, params)?;
        events.extend(out.events.iter().cloned().map(|e| (session.turn_index, e)));
        turns.push(TurnTranscript {
            input_tokens: input,
            answer_tokens: out.answer,
            reference_tokens: vocab.tokenize(&turn.reference_answer),
            plan_stats: out.plan_stats,
            op_counts: out.op_counts,
            wall_ms: out.wall_ms,
        });
    }
    let transcript = Transcript { instance_id: instance.id.clone(), mode: params.mode, task: instance.task, eos: params.eos, turns };
    let metrics = transcript.metrics()?;
    Ok(SessionOutcome { transcript, metrics, events, plans: session.plans })
}
