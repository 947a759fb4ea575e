//! Synthetic attention inputs with known structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{self, AttentionBlock, Matrix};

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random row-stochastic causal block with `n_new` rows ending at key
/// `n_total - 1`. A random share of cells is zeroed to create sparsity.
pub fn random_block(n_new: usize, n_total: usize, rng: &mut ChaCha8Rng) -> AttentionBlock {
    let offset = n_total - n_new;
    let zero_share: f64 = rng.gen_range(0.0..0.7);
    let mut w = Matrix::zeros(n_new, n_total);
    for r in 0..n_new {
        let g = offset + r;
        let mut row: Vec<f64> = (0..=g)
            .map(|_| if rng.gen_bool(zero_share) { 0.0 } else { rng.gen::<f64>().powi(3) })
            .collect();
        if row.iter().all(|&x| x == 0.0) {
            row[rng.gen_range(0..=g)] = 1.0;
        }
        let s: f64 = row.iter().sum();
        for (c, x) in row.into_iter().enumerate() {
            w.set(r, c, x / s);
        }
    }
    AttentionBlock::new(w).expect("rows are stochastic")
}

/// Queries and keys whose causal attention concentrates on a sink column
/// (key 0), the main diagonal and the first sub-diagonal.
#[derive(Debug, Clone)]
pub struct PlantedSparse {
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
}

/// `n` positions; one-hot positional codes plus a sink code carry the
/// planted logits, `noise_dims` Gaussian dimensions add background.
pub fn planted_sparse(n: usize, noise_dims: usize, seed: u64) -> PlantedSparse {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = n + 1 + noise_dims;
    let scale = (d as f64).sqrt();
    let (diag, sub, sink) = (8.0, 7.0, 8.0);
    let mut q = Matrix::zeros(n, d);
    let mut k = Matrix::zeros(n, d);
    let mut v = Matrix::zeros(n, d);
    for r in 0..n {
        q.set(r, r, scale * diag);
        if r > 0 {
            q.set(r, r - 1, scale * sub);
        }
        q.set(r, n, scale * sink);
        k.set(r, r, 1.0);
        if r == 0 {
            k.set(r, n, 1.0);
        }
        for j in 0..noise_dims {
            q.set(r, n + 1 + j, 0.5 * gaussian(&mut rng) * scale.sqrt());
            k.set(r, n + 1 + j, 0.5 * gaussian(&mut rng) * scale.sqrt());
        }
        for j in 0..d {
            v.set(r, j, gaussian(&mut rng));
        }
    }
    PlantedSparse { queries: q, keys: k, values: v }
}

impl PlantedSparse {
    /// Dense causal attention block of the whole sequence.
    pub fn block(&self) -> AttentionBlock {
        tensor::scaled_dot_attention(&self.queries, &self.keys, &self.values, 0)
            .expect("shapes agree")
            .1
    }
}

/// Multi-head instance whose query tokens and outputs attend to a planted
/// set of context keys while context tokens look elsewhere.
#[derive(Debug, Clone)]
pub struct PlantedQuery {
    /// Per head, queries of every position (inputs then outputs).
    pub queries: Vec<Matrix>,
    pub keys: Vec<Matrix>,
    pub input_len: usize,
    /// Input positions of the query tokens.
    pub query_positions: Vec<usize>,
    /// Context positions carrying the planted topic.
    pub relevant: Vec<usize>,
}

pub struct PlantedQuerySpec {
    pub n_context: usize,
    pub n_query: usize,
    pub n_output: usize,
    pub d: usize,
    pub n_heads: usize,
    pub n_relevant: usize,
    pub query_at_end: bool,
}

pub fn planted_query(spec: &PlantedQuerySpec, seed: u64) -> PlantedQuery {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_len = spec.n_context + spec.n_query;
    let total = input_len + spec.n_output;
    let query_positions: Vec<usize> = if spec.query_at_end {
        (spec.n_context..input_len).collect()
    } else {
        (0..spec.n_query).collect()
    };
    let context: Vec<usize> = (0..input_len).filter(|p| !query_positions.contains(p)).collect();
    let mut relevant: Vec<usize> = rand::seq::index::sample(&mut rng, context.len(), spec.n_relevant)
        .into_iter()
        .map(|i| context[i])
        .collect();
    relevant.sort_unstable();
    let d = spec.d;
    let scale = (d as f64).sqrt();
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect::<Vec<f64>>()
    };
    let (mut queries, mut keys) = (Vec::new(), Vec::new());
    for _ in 0..spec.n_heads {
        let topic = unit(&mut rng);
        let mut q = Matrix::zeros(total, d);
        let mut k = Matrix::zeros(total, d);
        for p in 0..total {
            let asks = p >= input_len || query_positions.contains(&p);
            let dir = if asks { topic.clone() } else { unit(&mut rng) };
            let strength = 6.0 * scale;
            for j in 0..d {
                q.set(p, j, strength * dir[j] + 0.3 * gaussian(&mut rng));
            }
            let planted = relevant.binary_search(&p).is_ok();
            let kd = unit(&mut rng);
            for j in 0..d {
                let base = 0.5 * kd[j];
                k.set(p, j, if planted { base + topic[j] } else { base });
            }
        }
        queries.push(q);
        keys.push(k);
    }
    PlantedQuery { queries, keys, input_len, query_positions, relevant }
}

impl PlantedQuery {
    /// Per head, causal attention rows of `positions` over every key up to
    /// the last position.
    pub fn rows(&self, positions: &[usize]) -> Vec<Matrix> {
        let end = positions.last().map_or(0, |p| p + 1);
        let prefix: Vec<usize> = (0..end).collect();
        self.queries
            .iter()
            .zip(&self.keys)
            .map(|(q, k)| {
                tensor::causal_attention_rows(&q.select_rows(positions), &k.select_rows(&prefix), positions)
                    .expect("positions are causal")
                    .0
            })
            .collect()
    }

    pub fn output_positions(&self) -> Vec<usize> {
        (self.input_len..self.queries[0].rows()).collect()
    }
}

/// Attention rows of `n_out` outputs over `n_in` inputs whose focus moves
/// from the first input to the last as generation proceeds.
pub fn drifting_attention(n_in: usize, n_out: usize, width: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logits = Matrix::zeros(n_out, n_in);
    for t in 0..n_out {
        let focus = (t as f64 + 0.5) / n_out as f64 * n_in as f64;
        for c in 0..n_in {
            let dist = (c as f64 - focus) / width;
            logits.set(t, c, -0.5 * dist * dist + 0.5 * gaussian(&mut rng));
        }
    }
    tensor::softmax_rows(&logits).expect("finite logits")
}
