//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! straight to stderr so it shows up without `--nocapture`.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use kvlab_core::bench::{
    build_fewshot_instance, build_qa_instance, build_sum_instance, synthetic_fewshot_corpus, synthetic_noise,
    synthetic_qa_corpus, synthetic_sum_corpus, synthetic_vocab, QueryPosition,
};
use kvlab_core::compress::{
    ground_truth_top_b, overlap_rate, progressive_decode, select_top_b, select_top_b_obs, token_scores, Aggregate,
    CompressionConfig, TokenSelection,
};
use kvlab_core::metrics::{
    accuracy, block_overlap_series, block_selections, f1, lcs_len, recovery_curve, rouge_l,
};
use kvlab_core::model::{forward_prefill, init_weights, ModelConfig, ModelWeights, TokenId};
use kvlab_core::session::{run_session, Mode, SessionParams};
use kvlab_core::sparsify::{
    brute_force_min_lines, coverage_ratio, greedy_select_lines, line_sums_rows, sample_rows, sparsify_head, BlockRows,
};
use kvlab_core::synth::{drifting_attention, planted_query, planted_sparse, random_block, PlantedQuerySpec};
use kvlab_core::tensor::Matrix;
use kvlab_core::DialogueInstance;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id:>2} [{verdict}] {name}: {detail}");
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

#[test]
fn c01_coverage_soundness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let alphas = [0.5, 0.9, 0.955, 1.0];
    let mut worst_slack = f64::INFINITY;
    let mut failures = 0;
    for _ in 0..200 {
        let n_total = rng.gen_range(1..=64);
        let n_new = rng.gen_range(1..=n_total.min(32));
        let block = random_block(n_new, n_total, &mut rng);
        let rows = BlockRows::from_block(&block);
        let sums = line_sums_rows(&rows);
        for &alpha in &alphas {
            let plan = greedy_select_lines(&rows, &sums, alpha).expect("greedy terminates");
            let slack = coverage_ratio(&block, &plan) - alpha;
            worst_slack = worst_slack.min(slack);
            if slack < -1e-9 {
                failures += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    let pass = failures == 0 && elapsed < Duration::from_secs(10);
    report(1, "coverage soundness", pass, &format!("800 runs, {failures} short, min slack {worst_slack:.3e}, {}", secs(elapsed)));
    assert!(pass);
}

#[test]
fn c02_oracle_dominance() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let alphas = [0.5, 0.7, 0.9, 0.955, 1.0];
    let (mut ratios, mut violations) = (Vec::new(), 0);
    for _ in 0..100 {
        let n_total = rng.gen_range(1..=12);
        let n_new = rng.gen_range(1..=n_total);
        let block = random_block(n_new, n_total, &mut rng);
        let alpha = alphas[rng.gen_range(0..alphas.len())];
        let rows = BlockRows::from_block(&block);
        let greedy = greedy_select_lines(&rows, &line_sums_rows(&rows), alpha).unwrap();
        let exact = brute_force_min_lines(&block, alpha).unwrap();
        let feasible = coverage_ratio(&block, &greedy) >= alpha - 1e-9;
        if !feasible || greedy.cost() < exact.cost {
            violations += 1;
        }
        if exact.cost > 0 {
            ratios.push(greedy.cost() as f64 / exact.cost as f64);
        }
    }
    let elapsed = started.elapsed();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let max = ratios.iter().copied().fold(1.0, f64::max);
    let optimal = ratios.iter().filter(|&&r| r == 1.0).count();
    let pass = violations == 0 && elapsed < Duration::from_secs(60);
    report(
        2,
        "oracle dominance",
        pass,
        &format!("100 blocks, {violations} violations, cost ratio mean {mean:.3} max {max:.3}, {optimal} optimal, {}", secs(elapsed)),
    );
    assert!(pass);
}

fn small_model(max_seq_len: usize, vocab: usize, seed: u64) -> ModelWeights {
    let config = ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, d_k: 8, d_v: 8, vocab_size: vocab, max_seq_len };
    init_weights(&config, seed).unwrap()
}

fn synthetic_instance(i: u64) -> DialogueInstance {
    match i % 3 {
        0 => {
            let positions: Vec<QueryPosition> = (0..3).map(|j| QueryPosition::ALL[(i as usize + j) % 3]).collect();
            build_qa_instance(&format!("qa-{i}"), &synthetic_qa_corpus(8, 2, i), 3, &positions, &synthetic_noise(4, i), i)
        }
        1 => build_sum_instance(&format!("sum-{i}"), &synthetic_sum_corpus(4, 3, i), i),
        _ => build_fewshot_instance(&format!("fewshot-{i}"), &synthetic_fewshot_corpus(6, 4, i), i),
    }
    .unwrap()
}

#[test]
fn c03_lossless_reduction() {
    let started = Instant::now();
    let vocab = synthetic_vocab();
    let max_seq_len = 1024;
    let weights = small_model(max_seq_len, vocab.len(), 33);
    let base = SessionParams {
        max_new: 16,
        compression: CompressionConfig { budget: 64, interval: 4, warmup: 4, obs_window: 4 },
        sample_floor: 4,
        seed: 3,
        eos: Some(vocab.eos()),
        ..SessionParams::default()
    };
    let mut mismatched = Vec::new();
    let mut turns = 0;
    for i in 0..50 {
        let inst = synthetic_instance(i);
        let dense = run_session(&weights, &inst, &vocab, &SessionParams { mode: Mode::Dense, ..base }).unwrap();
        let lossless = run_session(&weights, &inst, &vocab, &base.lossless(max_seq_len)).unwrap();
        turns += inst.turns.len();
        let same = dense.transcript.turns.len() == lossless.transcript.turns.len()
            && dense.transcript.turns.iter().zip(&lossless.transcript.turns).all(|(a, b)| a.answer_tokens == b.answer_tokens);
        if !same {
            mismatched.push(inst.id.clone());
        }
    }
    let elapsed = started.elapsed();
    let pass = mismatched.is_empty() && elapsed < Duration::from_secs(60);
    report(3, "lossless reduction", pass, &format!("50 instances, {turns} turns, mismatched {mismatched:?}, {}", secs(elapsed)));
    assert!(pass);
}

/// Max-sum subset of size `min(b, n)`; ties go to the lexicographically
/// smallest position list.
fn exhaustive_top_b(scores: &[f64], b: usize) -> Vec<usize> {
    let n = scores.len();
    let size = b.min(n);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != size {
            continue;
        }
        let set: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let sum: f64 = set.iter().map(|&i| scores[i]).sum();
        if best.as_ref().is_none_or(|(s, v)| sum > *s || (sum == *s && set < *v)) {
            best = Some((sum, set));
        }
    }
    best.map(|(_, v)| v).unwrap_or_default()
}

/// Random attention rows. Quantized rows use eighths, so equal subset sums
/// are exactly equal in floating point and ties really occur.
fn stochastic_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize, quantized: bool) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        if quantized {
            for c in 0..cols {
                m.set(r, c, rng.gen_range(0..4) as f64 / 8.0);
            }
            continue;
        }
        let raw: Vec<f64> = (0..cols).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        for (c, x) in raw.into_iter().enumerate() {
            m.set(r, c, x / s);
        }
    }
    m
}

/// Column sums of `rows` over the first `n` columns, by plain loops.
fn column_sums(rows: &Matrix, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for r in 0..rows.rows() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += rows.get(r, c);
        }
    }
    out
}

#[test]
fn c04_top_b_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut cases = 0;
    let mut mismatches = 0;
    for n in 1..=12usize {
        for b in 1..=4usize {
            for rep in 0..10 {
                let heads = rng.gen_range(1..=3);
                let window = rng.gen_range(1..=4);
                let quantized = rep % 2 == 0;
                let positions: Vec<usize> = (0..n).collect();
                let obs: Vec<Matrix> = (0..heads).map(|_| stochastic_rows(&mut rng, window, n, quantized)).collect();
                let per_head: Vec<Vec<f64>> = obs.iter().map(|m| column_sums(m, n)).collect();
                let scores: Vec<Vec<f64>> = obs.iter().map(|m| token_scores(m, &positions).unwrap()).collect();
                // Per-head selection.
                if let TokenSelection::PerHead(sel) = select_top_b_obs(&scores, &positions, b, Aggregate::PerHead) {
                    for (h, s) in sel.iter().enumerate() {
                        mismatches += usize::from(*s != exhaustive_top_b(&per_head[h], b));
                    }
                } else {
                    mismatches += 1;
                }
                // Shared selection summed over heads.
                let summed: Vec<f64> = (0..n).map(|i| per_head.iter().map(|s| s[i]).sum()).collect();
                match select_top_b_obs(&scores, &positions, b, Aggregate::SummedOverHeads) {
                    TokenSelection::Shared(s) => mismatches += usize::from(s != exhaustive_top_b(&summed, b)),
                    _ => mismatches += 1,
                }
                // Ground truth over output rows that also see later keys.
                let out_rows = rng.gen_range(1..=4);
                let outputs: Vec<Matrix> =
                    (0..heads).map(|_| stochastic_rows(&mut rng, out_rows, n + 3, quantized)).collect();
                let truth_scores: Vec<f64> = {
                    let per: Vec<Vec<f64>> = outputs.iter().map(|m| column_sums(m, n)).collect();
                    (0..n).map(|i| per.iter().map(|s| s[i]).sum()).collect()
                };
                mismatches += usize::from(ground_truth_top_b(&outputs, &positions, b).unwrap() != exhaustive_top_b(&truth_scores, b));
                mismatches += usize::from(select_top_b(&summed, &positions, b) != exhaustive_top_b(&summed, b));
                cases += 1;
            }
        }
    }
    let pass = mismatches == 0;
    report(4, "top-B correctness", pass, &format!("{cases} instances (n<=12, B<=4), {mismatches} mismatches"));
    assert!(pass);
}

#[test]
fn c05_sparsity_trend() {
    let n = 256;
    let etas = [0.02, 0.05, 0.1, 0.15];
    let alpha = 0.955;
    let mut reached = Vec::new();
    let mut op_fracs = Vec::new();
    for seed in 0..4 {
        let planted = planted_sparse(n, 4, seed);
        let block = planted.block();
        let curve = recovery_curve(&[block], &etas).unwrap();
        let first = curve.iter().find(|&&(_, r)| r >= 0.9).map(|&(e, _)| e);
        reached.push(first);
        let rows = sample_rows(n, 0.1, 32, seed).unwrap();
        let q_sampled = planted.queries.select_rows(&rows);
        let sparse = sparsify_head(&q_sampled, &planted.keys, &rows, n, alpha).unwrap();
        let ops = sparse.score_ops + sparse.plan.cell_count() as u64;
        op_fracs.push(ops as f64 / (n * n) as f64);
    }
    let recovery_ok = reached.iter().all(|r| r.is_some_and(|e| e <= 0.15));
    let ops_ok = op_fracs.iter().all(|&f| f <= 0.2);
    let pass = recovery_ok && ops_ok;
    let max_frac = op_fracs.iter().copied().fold(0.0, f64::max);
    report(
        5,
        "sparsity trend",
        pass,
        &format!("n=256, eta reaching 0.9 recovery {reached:?}; sparse prefill ops <= {max_frac:.3} of n_new*n (alpha {alpha})"),
    );
    assert!(pass);
}

fn obswindow_overlap(query_at_end: bool, seed: u64) -> f64 {
    let spec = PlantedQuerySpec {
        n_context: 56,
        n_query: 8,
        n_output: 16,
        d: 16,
        n_heads: 2,
        n_relevant: 8,
        query_at_end,
    };
    let budget = 8;
    let window = 8;
    let pq = planted_query(&spec, seed);
    let inputs: Vec<usize> = (0..pq.input_len).collect();
    let obs_positions: Vec<usize> = (pq.input_len - window..pq.input_len).collect();
    let obs = pq.rows(&obs_positions);
    let scores: Vec<Vec<f64>> = obs.iter().map(|m| token_scores(m, &inputs).unwrap()).collect();
    let selected = select_top_b_obs(&scores, &inputs, budget, Aggregate::SummedOverHeads);
    let truth = ground_truth_top_b(&pq.rows(&pq.output_positions()), &inputs, budget).unwrap();
    overlap_rate(selected.for_head(0), &truth, budget).unwrap()
}

#[test]
fn c06_query_position_trend() {
    let seeds = 50;
    let end: f64 = (0..seeds).map(|s| obswindow_overlap(true, s)).sum::<f64>() / seeds as f64;
    let begin: f64 = (0..seeds).map(|s| obswindow_overlap(false, s)).sum::<f64>() / seeds as f64;
    let pass = end - begin >= 0.2;
    report(6, "query-position trend", pass, &format!("overlap end {end:.3} vs begin {begin:.3}, gap {:.3}", end - begin));
    assert!(pass);
}

#[test]
fn c07_block_drift() {
    let (inputs, outputs, budget, n_blocks) = (64usize, 32usize, 24usize, 4usize);
    let input_ids: Vec<usize> = (0..inputs).collect();
    let (mut adjacent, mut far) = (Vec::new(), Vec::new());
    for seed in 0..50 {
        let rows = drifting_attention(inputs, outputs, 6.0, seed);
        let sel = block_selections(&[rows], &input_ids, n_blocks, budget).unwrap();
        let overlaps = block_overlap_series(&sel, budget).unwrap();
        for i in 0..n_blocks {
            for j in i + 1..n_blocks {
                if j - i == 1 {
                    adjacent.push(overlaps.get(i, j));
                } else {
                    far.push(overlaps.get(i, j));
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, f) = (mean(&adjacent), mean(&far));
    let pass = a > f;
    report(7, "block drift", pass, &format!("50 seeds, adjacent overlap {a:.3} vs distance>=2 {f:.3}"));
    assert!(pass);
}

#[test]
fn c08_cache_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (mut steps_checked, mut size_violations, mut op_violations) = (0, 0, 0);
    let mut runs = 0;
    for seed in 0..8 {
        let weights = small_model(400, 30, seed);
        let prompt: Vec<TokenId> = (0..rng.gen_range(8..64)).map(|_| rng.gen_range(0..30)).collect();
        let config = CompressionConfig {
            budget: rng.gen_range(1..32),
            interval: rng.gen_range(1..17),
            warmup: rng.gen_range(1..17),
            obs_window: rng.gen_range(1..=16),
        };
        let bound = config.budget + config.obs_window;
        let pre = forward_prefill(&weights, &prompt).unwrap();
        let mut cache = pre.cache;
        let out = progressive_decode(&weights, &mut cache, pre.logits, &config, 256, None).unwrap();
        runs += 1;
        let mut last_event = None;
        for step in &out.steps {
            if config.triggers_at(step.step - 1) {
                last_event = Some(step.step - 1);
            }
            let Some(at) = last_event else { continue };
            let retained = step.retained_at_event.as_ref().expect("compaction recorded");
            for (l, layer) in step.keys_per_head.iter().enumerate() {
                for (h, &keys) in layer.iter().enumerate() {
                    size_violations += usize::from(retained[l][h] > bound || keys > bound);
                    op_violations += usize::from(keys > retained[l][h] + (step.step - at));
                }
            }
            steps_checked += 1;
        }
        size_violations += out.events.iter().filter(|e| e.retained_ids.len() > bound).count();
    }
    let pass = size_violations == 0 && op_violations == 0 && steps_checked > 0;
    report(
        8,
        "cache bound",
        pass,
        &format!("{runs} runs x 256 tokens, {steps_checked} post-compression steps, {size_violations} size / {op_violations} op violations"),
    );
    assert!(pass);
}

/// `(prediction, reference, f1, rouge_l, accuracy)` with every score given
/// as an exact fraction.
const METRIC_TABLE: [(&str, &str, (u32, u32), (u32, u32), (u32, u32)); 20] = [
    ("a b c", "a b c", (1, 1), (3, 3), (3, 3)),
    ("", "a", (0, 1), (0, 1), (0, 1)),
    ("a", "a b", (2, 3), (1, 2), (1, 2)),
    ("b a", "a b", (1, 1), (1, 2), (0, 2)),
    ("a a a", "a", (1, 2), (1, 1), (1, 1)),
    ("a", "a a a", (1, 2), (1, 3), (1, 3)),
    ("x y z", "a b c", (0, 1), (0, 3), (0, 3)),
    ("a x b y c", "a b c", (3, 4), (3, 3), (1, 3)),
    ("c b a", "a b c", (1, 1), (1, 3), (1, 3)),
    ("the cat sat on the mat", "the cat is on the mat", (5, 6), (5, 6), (5, 6)),
    ("positive", "positive", (1, 1), (1, 1), (1, 1)),
    ("negative", "positive", (0, 1), (0, 1), (0, 1)),
    ("a b", "b", (2, 3), (1, 1), (0, 1)),
    ("a b a b", "b a b a", (1, 1), (3, 4), (0, 4)),
    ("a b c d", "a c", (2, 3), (2, 2), (1, 2)),
    ("d c b a", "a b c d", (1, 1), (1, 4), (0, 4)),
    ("a b", "a b c d", (2, 3), (2, 4), (2, 4)),
    ("red key attic", "attic", (1, 2), (1, 1), (0, 1)),
    ("a b b c", "a b c c", (3, 4), (3, 4), (3, 4)),
    ("x a y b z", "a b", (4, 7), (2, 2), (0, 2)),
];

#[test]
fn c09_metric_fixture() {
    let frac = |(n, d): (u32, u32)| n as f64 / d as f64;
    let mut wrong = Vec::new();
    for (i, &(pred, reference, ef1, erl, eacc)) in METRIC_TABLE.iter().enumerate() {
        let p: Vec<&str> = pred.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        let got = [f1(&p, &r).unwrap(), rouge_l(&p, &r).unwrap(), accuracy(&p, &r).unwrap()];
        let want = [frac(ef1), frac(erl), frac(eacc)];
        // The LCS numerator is an integer and must match exactly.
        let lcs_exact = lcs_len(&p, &r) as u32 * erl.1 == erl.0 * r.len() as u32;
        if got.iter().zip(&want).any(|(g, w)| (g - w).abs() > f64::EPSILON) || !lcs_exact {
            wrong.push((i + 1, got));
        }
    }
    let pass = wrong.is_empty();
    report(9, "metric fixture", pass, &format!("20 cases, mismatches {wrong:?}"));
    assert!(pass);
}

fn kvlab(dir: &Path, threads: usize, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_kvlab"))
        .args(args)
        .arg("--threads")
        .arg(threads.to_string())
        .env("KVLAB_DATA_DIR", dir)
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Every command with fixed seeds, writing into `dir`.
fn pipeline(dir: &Path, threads: usize) {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/block_2x4.json");
    let fixture = fixture.to_str().unwrap();
    kvlab(dir, threads, &["gen-model", "--seed", "7", "--d-model", "16", "--heads", "2", "--out", "model.json"]);
    kvlab(dir, threads, &["gen-bench", "--kind", "qa", "--count", "4", "--seed", "7", "--out", "qa.jsonl", "--vocab-out", "vocab.json"]);
    kvlab(dir, threads, &["gen-bench", "--kind", "sum", "--count", "2", "--seed", "7", "--out", "sum.jsonl"]);
    kvlab(dir, threads, &["gen-bench", "--kind", "fewshot", "--count", "2", "--seed", "7", "--out", "fewshot.jsonl"]);
    for mode in ["dense", "sparse", "obswindow-baseline"] {
        for bench in ["qa", "sum", "fewshot"] {
            let tag = format!("{mode}-{bench}");
            kvlab(
                dir,
                threads,
                &[
                    "run", "--model", "model.json", "--instances", &format!("{bench}.jsonl"), "--vocab", "vocab.json",
                    "--mode", mode, "--budget", "64", "--interval", "8", "--warmup", "8", "--sample-floor", "8",
                    "--max-new", "24", "--seed", "7",
                    "--out", &format!("{tag}.transcripts.jsonl"), "--metrics", &format!("{tag}.metrics.json"),
                    "--events", &format!("{tag}.events.jsonl"), "--plans", &format!("{tag}.plans.jsonl"),
                    "--answers", &format!("{tag}.answers.jsonl"),
                ],
            );
            for format in ["csv", "json"] {
                kvlab(
                    dir,
                    threads,
                    &[
                        "analyze", "--transcripts", &format!("{tag}.transcripts.jsonl"), "--plans",
                        &format!("{tag}.plans.jsonl"), "--format", format, "--out", &format!("{tag}.analysis.{format}"),
                    ],
                );
            }
        }
    }
    kvlab(dir, threads, &["oracle", "--which", "min-lines", "--block", fixture, "--out", "oracle-min.json"]);
    kvlab(dir, threads, &["oracle", "--which", "greedy", "--block", fixture, "--out", "oracle-greedy.json"]);
    kvlab(dir, threads, &["oracle", "--which", "validate", "--instances", "qa.jsonl", "--out", "oracle-validate.json"]);
}

fn snapshot(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn c10_cli_determinism() {
    let started = Instant::now();
    let runs: Vec<_> = [1usize, 1, 8]
        .iter()
        .map(|&threads| {
            let dir = tempfile::TempDir::new().unwrap();
            pipeline(dir.path(), threads);
            snapshot(dir.path())
        })
        .collect();
    let files = runs[0].len();
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(name, bytes)| runs[1..].iter().any(|other| other.get(*name) != Some(bytes)))
        .map(|(name, _)| name)
        .collect();
    let pass = differing.is_empty() && runs.iter().all(|r| r.len() == files);
    report(
        10,
        "CLI determinism",
        pass,
        &format!("{files} artifacts, runs with 1, 1 and 8 threads, differing {differing:?}, {}", secs(started.elapsed())),
    );
    assert!(pass);
}
