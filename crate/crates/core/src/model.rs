//! Deterministic toy decoder: learned token and position embeddings,
//! pre-norm blocks of multi-head causal attention plus a ReLU feed-forward,
//! and a final projection to vocabulary logits. Decoding is greedy.
//!
//! Attention is delegated to an [`AttentionBackend`] per layer, which is how
//! the sparse prefill and compressed decode paths plug into the same forward
//! pass as the dense baseline.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparsify::SparsifyError;
use crate::tensor::{self, AttentionBlock, Matrix, TensorError};

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;
/// Half-width of the uniform initialisation interval.
pub const INIT_SCALE: f64 = 0.1;
const NORM_EPS: f64 = 1e-6;

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    InvalidToken { id: TokenId, vocab: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("cache corrupt: {0}")]
    CacheCorrupt(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("unsupported weights format version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sparsify(#[from] SparsifyError),
    #[error("weights json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_k: 8,
            d_v: 8,
            vocab_size: 512,
            max_seq_len: 1024,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size > TokenId::MAX as usize {
            return Err(ModelError::InvalidConfig("vocab_size too large".into()));
        }
        Ok(())
    }

    pub fn ff_width(&self) -> usize {
        4 * self.d_model
    }

    /// Total attention heads across all layers.
    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

/// Ordered token ids of a prompt, history or answer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        check_tokens(&self.0, config)?;
        if self.len() > config.max_seq_len {
            return Err(ModelError::SequenceTooLong { len: self.len(), max: config.max_seq_len });
        }
        Ok(())
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

fn check_tokens(tokens: &[TokenId], config: &ModelConfig) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        Some(&id) => Err(ModelError::InvalidToken { id, vocab: config.vocab_size }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    /// Projection of the concatenated head outputs back to `d_model`.
    pub w_o: Matrix,
    pub ff_in: Matrix,
    pub ff_out: Matrix,
    pub attn_norm: Vec<f64>,
    pub ff_norm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

/// Uniform values in `[-INIT_SCALE, INIT_SCALE)` from the top 53 bits of a
/// ChaCha8 stream. The mapping is spelled out here so weights do not depend
/// on a sampling algorithm that may change between `rand` releases.
struct WeightStream(ChaCha8Rng);

impl WeightStream {
    fn next(&mut self) -> f64 {
        let unit = (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (2.0 * unit - 1.0) * INIT_SCALE
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| self.next()).collect();
        Matrix::from_vec(rows, cols, data).expect("sized by construction")
    }

    fn vector(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next()).collect()
    }
}

/// Deterministic weights: every matrix entry and output bias uniform in
/// `[-0.1, 0.1)`, normalisation gains 1. Same `(config, seed)` gives
/// bit-identical weights.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut s = WeightStream(ChaCha8Rng::seed_from_u64(seed));
    let d = config.d_model;
    let token_embedding = s.matrix(config.vocab_size, d);
    let position_embedding = s.matrix(config.max_seq_len, d);
    let layers = (0..config.n_layers)
        .map(|_| {
            let heads = (0..config.n_heads)
                .map(|_| HeadWeights {
                    w_q: s.matrix(d, config.d_k),
                    w_k: s.matrix(d, config.d_k),
                    w_v: s.matrix(d, config.d_v),
                })
                .collect();
            LayerWeights {
                heads,
                w_o: s.matrix(config.n_heads * config.d_v, d),
                ff_in: s.matrix(d, config.ff_width()),
                ff_out: s.matrix(config.ff_width(), d),
                attn_norm: vec![1.0; d],
                ff_norm: vec![1.0; d],
            }
        })
        .collect();
    let w_out = s.matrix(d, config.vocab_size);
    let b_out = s.vector(config.vocab_size);
    Ok(ModelWeights {
        config: *config,
        token_embedding,
        position_embedding,
        layers,
        final_norm: vec![1.0; d],
        w_out,
        b_out,
    })
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    version: u32,
    config: ModelConfig,
    weights: WeightsBody,
}

#[derive(Serialize, Deserialize)]
struct WeightsBody {
    token_embedding: Matrix,
    position_embedding: Matrix,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f64>,
    w_out: Matrix,
    b_out: Vec<f64>,
}

impl ModelWeights {
    pub fn to_json(&self) -> Result<String> {
        let file = WeightsFile {
            version: WEIGHTS_FORMAT_VERSION,
            config: self.config,
            weights: WeightsBody {
                token_embedding: self.token_embedding.clone(),
                position_embedding: self.position_embedding.clone(),
                layers: self.layers.clone(),
                final_norm: self.final_norm.clone(),
                w_out: self.w_out.clone(),
                b_out: self.b_out.clone(),
            },
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: WeightsFile = serde_json::from_str(text)?;
        if file.version != WEIGHTS_FORMAT_VERSION {
            return Err(ModelError::UnsupportedVersion(file.version));
        }
        let w = file.weights;
        let weights = ModelWeights {
            config: file.config,
            token_embedding: w.token_embedding,
            position_embedding: w.position_embedding,
            layers: w.layers,
            final_norm: w.final_norm,
            w_out: w.w_out,
            b_out: w.b_out,
        };
        weights.validate()?;
        Ok(weights)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Checks every shape against the config and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let shape = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if m.rows() != rows || m.cols() != cols || m.data().len() != rows * cols {
                return Err(ModelError::InvalidWeights(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(ModelError::InvalidWeights(format!("{name} has non-finite values")));
            }
            Ok(())
        };
        let vector = |name: &str, v: &[f64], n: usize| -> Result<()> {
            if v.len() != n || v.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::InvalidWeights(format!("{name} must hold {n} finite values")));
            }
            Ok(())
        };
        shape("token_embedding", &self.token_embedding, c.vocab_size, c.d_model)?;
        shape("position_embedding", &self.position_embedding, c.max_seq_len, c.d_model)?;
        if self.layers.len() != c.n_layers {
            return Err(ModelError::InvalidWeights(format!(
                "{} layers, expected {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.heads.len() != c.n_heads {
                return Err(ModelError::InvalidWeights(format!("layer {l} head count")));
            }
            for (h, head) in layer.heads.iter().enumerate() {
                shape(&format!("layer {l} head {h} w_q"), &head.w_q, c.d_model, c.d_k)?;
                shape(&format!("layer {l} head {h} w_k"), &head.w_k, c.d_model, c.d_k)?;
                shape(&format!("layer {l} head {h} w_v"), &head.w_v, c.d_model, c.d_v)?;
            }
            shape(&format!("layer {l} w_o"), &layer.w_o, c.n_heads * c.d_v, c.d_model)?;
            shape(&format!("layer {l} ff_in"), &layer.ff_in, c.d_model, c.ff_width())?;
            shape(&format!("layer {l} ff_out"), &layer.ff_out, c.ff_width(), c.d_model)?;
            vector(&format!("layer {l} attn_norm"), &layer.attn_norm, c.d_model)?;
            vector(&format!("layer {l} ff_norm"), &layer.ff_norm, c.d_model)?;
        }
        vector("final_norm", &self.final_norm, c.d_model)?;
        shape("w_out", &self.w_out, c.d_model, c.vocab_size)?;
        vector("b_out", &self.b_out, c.vocab_size)?;
        Ok(())
    }
}

/// Projections of one head for a block of rows.
pub fn qkv_project(x: &Matrix, head: &HeadWeights) -> Result<(Matrix, Matrix, Matrix)> {
    Ok((x.matmul(&head.w_q)?, x.matmul(&head.w_k)?, x.matmul(&head.w_v)?))
}

/// Per-head store of every processed position's query, key and value rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadCache {
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
}

impl HeadCache {
    fn empty(d_k: usize, d_v: usize) -> Self {
        Self {
            queries: Matrix::zeros(0, d_k),
            keys: Matrix::zeros(0, d_k),
            values: Matrix::zeros(0, d_v),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Full key/value history of a sequence, `[layer][head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub layers: Vec<Vec<HeadCache>>,
    len: usize,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        let layers = (0..config.n_layers)
            .map(|_| (0..config.n_heads).map(|_| HeadCache::empty(config.d_k, config.d_v)).collect())
            .collect();
        Self { layers, len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadCache {
        &self.layers[layer][head]
    }

    /// Drops every position at or beyond `len`.
    pub fn truncate(&mut self, len: usize) {
        for head in self.layers.iter_mut().flatten() {
            head.queries.truncate_rows(len);
            head.keys.truncate_rows(len);
            head.values.truncate_rows(len);
        }
        self.len = self.len.min(len);
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(ModelError::CacheCorrupt(format!(
                "{} layers for a {}-layer model",
                self.layers.len(),
                config.n_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.len() != config.n_heads {
                return Err(ModelError::CacheCorrupt(format!("layer {l} has {} heads", layer.len())));
            }
            for (h, head) in layer.iter().enumerate() {
                let lens = [head.queries.rows(), head.keys.rows(), head.values.rows()];
                if lens.iter().any(|&n| n != self.len)
                    || head.keys.cols() != config.d_k
                    || head.values.cols() != config.d_v
                {
                    return Err(ModelError::CacheCorrupt(format!(
                        "layer {l} head {h} holds {lens:?} rows, expected {}",
                        self.len
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Computes the attention outputs of one layer. `queries[h]` holds the new
/// rows' queries of head `h`; `heads[h]` already contains the new rows' keys
/// and values, and the first new row sits at global position `row_offset`.
pub trait AttentionBackend {
    fn attend_layer(
        &mut self,
        layer: usize,
        queries: &[Matrix],
        heads: &[HeadCache],
        row_offset: usize,
    ) -> Result<Vec<Matrix>>;
}

/// Full causal attention. Optionally keeps every head's weight block.
#[derive(Debug, Default)]
pub struct DenseAttention {
    pub record_blocks: bool,
    /// `[layer][head]` blocks of the most recent forward call, when recorded.
    pub blocks: Vec<Vec<AttentionBlock>>,
    pub score_ops: u64,
}

impl DenseAttention {
    pub fn recording() -> Self {
        Self { record_blocks: true, ..Self::default() }
    }
}

impl AttentionBackend for DenseAttention {
    fn attend_layer(
        &mut self,
        layer: usize,
        queries: &[Matrix],
        heads: &[HeadCache],
        row_offset: usize,
    ) -> Result<Vec<Matrix>> {
        let record = self.record_blocks;
        let results: Vec<tensor::Result<(tensor::Attended, Option<AttentionBlock>)>> = queries
            .par_iter()
            .zip(heads.par_iter())
            .map(|(q, h)| {
                if record {
                    let (z, block) = tensor::scaled_dot_attention(q, &h.keys, &h.values, row_offset)?;
                    let ops = block.weights.data().len() as u64;
                    let causal_ops = ops - (block.n_new * (block.n_new - 1) / 2) as u64;
                    Ok((tensor::Attended { output: z, score_ops: causal_ops }, Some(block)))
                } else {
                    Ok((tensor::dense_attention(q, &h.keys, &h.values, row_offset)?, None))
                }
            })
            .collect();
        if record && layer == 0 {
            self.blocks.clear();
        }
        let mut outputs = Vec::with_capacity(results.len());
        let mut blocks = Vec::new();
        for r in results {
            let (att, block) = r?;
            self.score_ops += att.score_ops;
            outputs.push(att.output);
            blocks.extend(block);
        }
        if record {
            self.blocks.push(blocks);
        }
        Ok(outputs)
    }
}

fn rms_norm(x: &Matrix, gain: &[f64]) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (mean_sq + NORM_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v = *v * inv * g;
        }
    }
    out
}

fn embed(weights: &ModelWeights, tokens: &[TokenId], start: usize) -> Matrix {
    let d = weights.config.d_model;
    let mut x = Matrix::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        let tok = weights.token_embedding.row(t as usize);
        let pos = weights.position_embedding.row(start + i);
        for ((o, a), b) in x.row_mut(i).iter_mut().zip(tok).zip(pos) {
            *o = a + b;
        }
    }
    x
}

/// Runs `tokens` through every layer, appending their queries, keys and
/// values to `cache`. Returns the final hidden rows (before the output norm).
pub fn forward_rows(
    weights: &ModelWeights,
    cache: &mut KvCache,
    tokens: &[TokenId],
    backend: &mut dyn AttentionBackend,
) -> Result<Matrix> {
    let config = &weights.config;
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    check_tokens(tokens, config)?;
    cache.check(config)?;
    let start = cache.len();
    let end = start + tokens.len();
    if end > config.max_seq_len {
        return Err(ModelError::SequenceTooLong { len: end, max: config.max_seq_len });
    }
    let mut x = embed(weights, tokens, start);
    for (l, layer) in weights.layers.iter().enumerate() {
        let h = rms_norm(&x, &layer.attn_norm);
        let projected: Vec<(Matrix, Matrix, Matrix)> = layer
            .heads
            .par_iter()
            .map(|hw| qkv_project(&h, hw))
            .collect::<Result<_>>()?;
        let mut queries = Vec::with_capacity(projected.len());
        for (head_cache, (q, k, v)) in cache.layers[l].iter_mut().zip(projected) {
            head_cache.queries.append_rows(&q)?;
            head_cache.keys.append_rows(&k)?;
            head_cache.values.append_rows(&v)?;
            queries.push(q);
        }
        let heads_out = backend.attend_layer(l, &queries, &cache.layers[l], start)?;
        let mut concat = Matrix::zeros(tokens.len(), config.n_heads * config.d_v);
        for (hi, z) in heads_out.iter().enumerate() {
            for r in 0..tokens.len() {
                concat.row_mut(r)[hi * config.d_v..(hi + 1) * config.d_v].copy_from_slice(z.row(r));
            }
        }
        x.add_assign(&concat.matmul(&layer.w_o)?)?;
        let h2 = rms_norm(&x, &layer.ff_norm);
        let mut inner = h2.matmul(&layer.ff_in)?;
        for r in 0..inner.rows() {
            for v in inner.row_mut(r) {
                *v = v.max(0.0);
            }
        }
        x.add_assign(&inner.matmul(&layer.ff_out)?)?;
    }
    cache.len = end;
    Ok(x)
}

/// `h W_out + b_out` for one hidden row after the output norm.
pub fn logits_for(weights: &ModelWeights, hidden: &[f64]) -> Result<Vec<f64>> {
    let row = Matrix::from_vec(1, hidden.len(), hidden.to_vec())?;
    let normed = rms_norm(&row, &weights.final_norm);
    let mut logits = normed.matmul(&weights.w_out)?.row(0).to_vec();
    for (l, b) in logits.iter_mut().zip(&weights.b_out) {
        *l += b;
    }
    Ok(logits)
}

/// Index of the largest logit; ties go to the smallest token id.
pub fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Feeds `tokens` with `backend` and returns the logits after the last one.
pub fn extend(
    weights: &ModelWeights,
    cache: &mut KvCache,
    tokens: &[TokenId],
    backend: &mut dyn AttentionBackend,
) -> Result<Vec<f64>> {
    let hidden = forward_rows(weights, cache, tokens, backend)?;
    logits_for(weights, hidden.row(hidden.rows() - 1))
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub hidden: Matrix,
    pub cache: KvCache,
    /// `[layer][head]` attention weights of the prompt.
    pub blocks: Vec<Vec<AttentionBlock>>,
    /// Logits for the token following the prompt.
    pub logits: Vec<f64>,
}

/// Dense causal forward pass over a fresh prompt.
pub fn forward_prefill(weights: &ModelWeights, tokens: &[TokenId]) -> Result<PrefillOutput> {
    let mut cache = KvCache::new(&weights.config);
    let mut backend = DenseAttention::recording();
    let hidden = forward_rows(weights, &mut cache, tokens, &mut backend)?;
    let logits = logits_for(weights, hidden.row(hidden.rows() - 1))?;
    Ok(PrefillOutput { hidden, cache, blocks: backend.blocks, logits })
}

/// Feeds `last_token` against the full cache and picks the next token greedily.
pub fn decode_step(
    weights: &ModelWeights,
    cache: &mut KvCache,
    last_token: TokenId,
) -> Result<(Vec<f64>, TokenId)> {
    if cache.is_empty() {
        return Err(ModelError::CacheCorrupt("decode_step needs a prefilled cache".into()));
    }
    let logits = extend(weights, cache, &[last_token], &mut DenseAttention::default())?;
    let next = argmax(&logits);
    Ok((logits, next))
}

/// Greedy generation: at most `max_new` tokens, stopping after `eos_id`
/// (which is included in the output).
pub fn generate(
    weights: &ModelWeights,
    prompt: &[TokenId],
    max_new: usize,
    eos_id: Option<TokenId>,
) -> Result<TokenSequence> {
    if prompt.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if max_new == 0 {
        check_tokens(prompt, &weights.config)?;
        return Ok(TokenSequence::default());
    }
    let PrefillOutput { mut cache, mut logits, .. } = forward_prefill(weights, prompt)?;
    let mut out = Vec::with_capacity(max_new);
    loop {
        let tok = argmax(&logits);
        out.push(tok);
        if Some(tok) == eos_id || out.len() == max_new {
            break;
        }
        logits = decode_step(weights, &mut cache, tok)?.0;
    }
    Ok(TokenSequence(out))
}
