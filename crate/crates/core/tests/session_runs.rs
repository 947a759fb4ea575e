use kvlab_core::bench::{build_qa_instance, synthetic_noise, synthetic_qa_corpus, synthetic_vocab, QueryPosition};
use kvlab_core::model::{generate, init_weights, ModelConfig, ModelWeights};
use kvlab_core::session::{run_session, run_turn, Mode, SessionError, SessionParams, SessionState};
use kvlab_core::{CompressionConfig, DialogueInstance};

fn weights(vocab: usize) -> ModelWeights {
    let config = ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, d_k: 8, d_v: 8, vocab_size: vocab, max_seq_len: 512 };
    init_weights(&config, 5).unwrap()
}

fn instance(seed: u64) -> DialogueInstance {
    let pool = synthetic_qa_corpus(5, 2, seed);
    let noise = synthetic_noise(3, seed);
    build_qa_instance(&format!("i{seed}"), &pool, 3, &QueryPosition::ALL, &noise, seed).unwrap()
}

fn params(mode: Mode) -> SessionParams {
    SessionParams {
        mode,
        max_new: 24,
        compression: CompressionConfig { budget: 16, interval: 4, warmup: 4, obs_window: 4 },
        sample_floor: 8,
        seed: 3,
        ..SessionParams::default()
    }
}

#[test]
fn first_turn_lossless_matches_generate() {
    let vocab = synthetic_vocab();
    let w = weights(vocab.len());
    let inst = instance(1);
    let input = vocab.tokenize(&inst.turns[0].prompt_text());
    let p = params(Mode::Sparse).lossless(512);
    let mut s = SessionState::new(&w, 0);
    let answer = run_turn(&w, &mut s, &input, &p).unwrap().answer;
    assert_eq!(answer, generate(&w, &input, p.max_new, None).unwrap().0);
}

#[test]
fn lossless_sessions_equal_dense() {
    let vocab = synthetic_vocab();
    let w = weights(vocab.len());
    for seed in 0..5 {
        let inst = instance(seed);
        let dense = run_session(&w, &inst, &vocab, &params(Mode::Dense)).unwrap();
        let lossless = run_session(&w, &inst, &vocab, &params(Mode::Sparse).lossless(512)).unwrap();
        for (a, b) in dense.transcript.turns.iter().zip(&lossless.transcript.turns) {
            assert_eq!(a.answer_tokens, b.answer_tokens);
        }
        assert_eq!(lossless.plans.len(), 3 * w.config.total_heads());
    }
}

#[test]
fn sessions_are_deterministic() {
    let vocab = synthetic_vocab();
    let w = weights(vocab.len());
    let inst = instance(7);
    for mode in [Mode::Dense, Mode::Sparse, Mode::ObswindowBaseline] {
        let a = run_session(&w, &inst, &vocab, &params(mode)).unwrap();
        let b = run_session(&w, &inst, &vocab, &params(mode)).unwrap();
        assert_eq!(serde_json::to_string(&a.transcript).unwrap(), serde_json::to_string(&b.transcript).unwrap());
        a.metrics.validate().unwrap();
    }
}

#[test]
fn sparse_uses_fewer_decode_ops_than_dense() {
    let vocab = synthetic_vocab();
    let w = weights(vocab.len());
    let inst = instance(2);
    let dense = run_session(&w, &inst, &vocab, &params(Mode::Dense)).unwrap();
    let sparse = run_session(&w, &inst, &vocab, &params(Mode::Sparse)).unwrap();
    let ops = |o: &kvlab_core::session::SessionOutcome| o.transcript.turns.iter().map(|t| t.op_counts.decode_score_ops).sum::<u64>();
    assert!(ops(&sparse) < ops(&dense));
    assert!(sparse.transcript.turns.iter().all(|t| t.plan_stats.min_coverage >= 0.955 - 1e-9));
}

#[test]
fn empty_turn_list_is_an_error() {
    let vocab = synthetic_vocab();
    let w = weights(vocab.len());
    let mut inst = instance(0);
    inst.turns.clear();
    assert!(matches!(run_session(&w, &inst, &vocab, &params(Mode::Dense)), Err(SessionError::NoTurns)));
}
