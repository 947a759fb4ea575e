use kvlab_core::model::{self, argmax, forward_prefill, generate, init_weights, ModelConfig, ModelWeights, TokenId};
use kvlab_core::tensor::Matrix;

fn naive_matmul(a: &[Vec<f64>], b: &Matrix) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| (0..b.cols()).map(|j| (0..b.rows()).map(|k| row[k] * b.get(k, j)).sum()).collect())
        .collect()
}

fn naive_norm(rows: &[Vec<f64>], gain: &[f64]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let ms = r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64;
            let inv = 1.0 / (ms + 1e-6).sqrt();
            r.iter().zip(gain).map(|(x, g)| x * inv * g).collect()
        })
        .collect()
}

/// Full recomputation of the whole sequence, returning next-token logits.
fn naive_logits(w: &ModelWeights, tokens: &[TokenId]) -> Vec<f64> {
    let c = &w.config;
    let n = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| (0..c.d_model).map(|j| w.token_embedding.get(t as usize, j) + w.position_embedding.get(p, j)).collect())
        .collect();
    for layer in &w.layers {
        let h = naive_norm(&x, &layer.attn_norm);
        let mut concat = vec![Vec::new(); n];
        for hw in &layer.heads {
            let q = naive_matmul(&h, &hw.w_q);
            let k = naive_matmul(&h, &hw.w_k);
            let v = naive_matmul(&h, &hw.w_v);
            for r in 0..n {
                let s: Vec<f64> = (0..=r)
                    .map(|col| q[r].iter().zip(&k[col]).map(|(a, b)| a * b).sum::<f64>() / (c.d_k as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..c.d_v {
                    concat[r].push((0..=r).map(|col| e[col] / z * v[col][j]).sum());
                }
            }
        }
        let o = naive_matmul(&concat, &layer.w_o);
        for (xr, or) in x.iter_mut().zip(&o) {
            for (a, b) in xr.iter_mut().zip(or) {
                *a += b;
            }
        }
        let h2 = naive_norm(&x, &layer.ff_norm);
        let inner: Vec<Vec<f64>> = naive_matmul(&h2, &layer.ff_in)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        let f = naive_matmul(&inner, &layer.ff_out);
        for (xr, fr) in x.iter_mut().zip(&f) {
            for (a, b) in xr.iter_mut().zip(fr) {
                *a += b;
            }
        }
    }
    let last = naive_norm(&x[n - 1..], &w.final_norm);
    let mut logits = naive_matmul(&last, &w.w_out).remove(0);
    for (l, b) in logits.iter_mut().zip(&w.b_out) {
        *l += b;
    }
    logits
}

fn naive_generate(w: &ModelWeights, prompt: &[TokenId], max_new: usize) -> Vec<TokenId> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let t = argmax(&naive_logits(w, &seq));
        out.push(t);
        seq.push(t);
    }
    out
}

fn small(seed: u64) -> ModelWeights {
    let config = ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, d_k: 8, d_v: 8, vocab_size: 40, max_seq_len: 160 };
    init_weights(&config, seed).unwrap()
}

#[test]
fn prefill_logits_match_naive() {
    let w = small(1);
    let prompt: Vec<TokenId> = (0..12).map(|i| (i * 7 % 40) as TokenId).collect();
    let out = forward_prefill(&w, &prompt).unwrap();
    let naive = naive_logits(&w, &prompt);
    for (a, b) in out.logits.iter().zip(&naive) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn cached_decode_matches_uncached_ten_steps() {
    for seed in 0..5 {
        let w = small(seed);
        let prompt: Vec<TokenId> = (0..9).map(|i| ((i * 13 + seed as usize) % 40) as TokenId).collect();
        assert_eq!(generate(&w, &prompt, 10, None).unwrap().0, naive_generate(&w, &prompt, 10));
    }
}

#[test]
fn long_decode_matches_uncached() {
    let w = small(7);
    let prompt: Vec<TokenId> = vec![3, 1, 4, 1, 5, 9, 2, 6];
    let max_new = 128 - prompt.len();
    assert_eq!(generate(&w, &prompt, max_new, None).unwrap().0, naive_generate(&w, &prompt, max_new));
}

#[test]
fn prefill_then_extend_equals_single_prefill() {
    let w = small(3);
    let tokens: Vec<TokenId> = (0..20).map(|i| (i * 3 % 40) as TokenId).collect();
    let whole = forward_prefill(&w, &tokens).unwrap();
    let mut part = forward_prefill(&w, &tokens[..11]).unwrap();
    let logits = model::extend(&w, &mut part.cache, &tokens[11..], &mut model::DenseAttention::default()).unwrap();
    assert_eq!(logits, whole.logits);
    assert_eq!(part.cache, whole.cache);
}
