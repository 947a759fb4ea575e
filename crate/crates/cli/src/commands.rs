use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use kvlab_core::bench::{
    self, build_fewshot_instance, build_qa_instance, build_sum_instance, paragraphs, synthetic_fewshot_corpus,
    synthetic_noise, synthetic_qa_corpus, synthetic_sum_corpus, synthetic_vocab, validate_instance, FewShotRecord,
    QaRecord, QueryPosition, SumRecord,
};
use kvlab_core::compress::CompressionEvent;
use kvlab_core::metrics::{self, segment_overlap};
use kvlab_core::model::{init_weights, ModelConfig, ModelWeights};
use kvlab_core::session::{run_session, Mode, PlanRecord, SessionOutcome, SessionParams, Transcript};
use kvlab_core::sparsify::{brute_force_min_lines, coverage_ratio, greedy_select_lines, line_sums_rows, BlockRows};
use kvlab_core::tensor::{AttentionBlock, Matrix};
use kvlab_core::{DialogueInstance, HeadPlan, MetricsRecord, Vocab};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::{AnalyzeArgs, Analysis, BenchKind, Format, GenBenchArgs, GenModelArgs, ModeArg, OracleArgs, OracleKind, RunArgs};

pub struct Context {
    pub data_dir: Option<PathBuf>,
    pub stdout: bool,
}

impl Context {
    fn resolve(&self, path: &Path) -> PathBuf {
        match &self.data_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        }
    }

    fn read_to_string(&self, path: &Path) -> Result<String> {
        let full = self.resolve(path);
        std::fs::read_to_string(&full).map_err(|e| CliError::from(e).context(full.display()))
    }

    fn read_jsonl<T: serde::de::DeserializeOwned>(&self, path: &Path) -> Result<Vec<T>> {
        let full = self.resolve(path);
        let file = File::open(&full).map_err(|e| CliError::from(e).context(full.display()))?;
        bench::read_jsonl(BufReader::new(file)).map_err(|e| CliError::from(e).context(full.display()))
    }

    fn write(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let full = self.resolve(path);
        if let Some(parent) = full.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&full, bytes).map_err(|e| CliError::runtime(e.to_string()).context(full.display()))?;
        info!("wrote {}", full.display());
        Ok(())
    }

    /// Fails before any work when the primary output has nowhere to go.
    fn require_output(&self, out: &Option<PathBuf>) -> Result<()> {
        if out.is_none() && !self.stdout {
            return Err(CliError::validation("no output: pass --out or --stdout"));
        }
        Ok(())
    }

    fn emit_primary(&self, out: &Option<PathBuf>, bytes: &[u8]) -> Result<()> {
        if let Some(path) = out {
            self.write(path, bytes)?;
        }
        if self.stdout {
            std::io::stdout().lock().write_all(bytes)?;
        }
        Ok(())
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    bench::write_jsonl(items, &mut buf)?;
    Ok(buf)
}

fn load_vocab(ctx: &Context, path: &Option<PathBuf>) -> Result<Vocab> {
    match path {
        Some(p) => Vocab::from_json(&ctx.read_to_string(p)?).map_err(|e| CliError::from(e).context(p.display())),
        None => Ok(synthetic_vocab()),
    }
}

pub fn gen_model(ctx: &Context, args: GenModelArgs) -> Result<()> {
    ctx.require_output(&args.out)?;
    let vocab_size = match args.vocab_size {
        Some(v) => v,
        None => load_vocab(ctx, &args.vocab)?.len(),
    };
    let config = ModelConfig {
        n_layers: args.layers,
        n_heads: args.heads,
        d_model: args.d_model,
        d_k: args.d_k,
        d_v: args.d_v,
        vocab_size,
        max_seq_len: args.max_seq_len,
    };
    let weights = init_weights(&config, args.seed)?;
    ctx.emit_primary(&args.out, weights.to_json()?.as_bytes())
}

/// Independent seed for instance `i` of a benchmark.
fn instance_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn gen_bench(ctx: &Context, args: GenBenchArgs) -> Result<()> {
    ctx.require_output(&args.out)?;
    if args.count == 0 {
        return Err(CliError::validation("--count must be at least 1"));
    }
    let noise_file = match &args.noise {
        Some(p) => Some(paragraphs(&ctx.read_to_string(p)?)),
        None => None,
    };
    let instances: Vec<DialogueInstance> = match args.kind {
        BenchKind::Qa => {
            let corpus: Option<Vec<QaRecord>> = args.corpus.as_ref().map(|p| ctx.read_jsonl(p)).transpose()?;
            (0..args.count)
                .map(|i| {
                    let s = instance_seed(args.seed, i);
                    let pool = corpus.clone().unwrap_or_else(|| synthetic_qa_corpus(args.turns * 3, 2, s));
                    let noise = noise_file.clone().unwrap_or_else(|| synthetic_noise(args.turns * 2, s));
                    let positions: Vec<QueryPosition> =
                        (0..args.turns).map(|j| QueryPosition::ALL[(i + j) % QueryPosition::ALL.len()]).collect();
                    build_qa_instance(&format!("qa-{i}"), &pool, args.turns, &positions, &noise, s)
                })
                .collect::<std::result::Result<_, _>>()?
        }
        BenchKind::Sum => {
            let corpus: Option<Vec<SumRecord>> = args.corpus.as_ref().map(|p| ctx.read_jsonl(p)).transpose()?;
            (0..args.count)
                .map(|i| {
                    let s = instance_seed(args.seed, i);
                    let pool = corpus.clone().unwrap_or_else(|| synthetic_sum_corpus(4, 3, s));
                    build_sum_instance(&format!("sum-{i}"), &pool, s)
                })
                .collect::<std::result::Result<_, _>>()?
        }
        BenchKind::Fewshot => {
            let corpus: Option<Vec<FewShotRecord>> = args.corpus.as_ref().map(|p| ctx.read_jsonl(p)).transpose()?;
            (0..args.count)
                .map(|i| {
                    let s = instance_seed(args.seed, i);
                    let pool = corpus.clone().unwrap_or_else(|| synthetic_fewshot_corpus(6, 4, s));
                    build_fewshot_instance(&format!("fewshot-{i}"), &pool, s)
                })
                .collect::<std::result::Result<_, _>>()?
        }
    };
    for inst in &instances {
        let report = validate_instance(inst);
        if !report.is_valid() {
            return Err(CliError::runtime(format!("generated instance {} is invalid: {:?}", inst.id, report.violations)));
        }
    }
    if let Some(path) = &args.vocab_out {
        let vocab = if args.corpus.is_none() && args.noise.is_none() {
            synthetic_vocab()
        } else {
            let texts: Vec<String> = instances
                .iter()
                .flat_map(|inst| inst.turns.iter().flat_map(|t| [t.prompt_text(), t.reference_answer.clone()]))
                .collect();
            Vocab::from_texts(texts.iter().map(String::as_str), args.vocab_size)?
        };
        ctx.write(path, vocab.to_json()?.as_bytes())?;
    }
    ctx.emit_primary(&args.out, &jsonl(&instances)?)
}

/// Run settings readable from `--config`; every field is optional and
/// command-line flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    mode: Option<ModeArg>,
    alpha: Option<f64>,
    budget: Option<usize>,
    interval: Option<usize>,
    warmup: Option<usize>,
    obs_window: Option<usize>,
    sample_rate: Option<f64>,
    sample_floor: Option<usize>,
    max_new: Option<usize>,
    seed: Option<u64>,
    lossless: Option<bool>,
    timings: Option<bool>,
}

fn session_params(args: &RunArgs, file: RunConfig, weights: &ModelWeights, vocab: &Vocab) -> SessionParams {
    let mode = match args.mode.or(file.mode) {
        Some(ModeArg::Dense) => Mode::Dense,
        Some(ModeArg::ObswindowBaseline) => Mode::ObswindowBaseline,
        Some(ModeArg::Sparse) | None => Mode::Sparse,
    };
    let mut p = SessionParams { mode, ..SessionParams::default() };
    macro_rules! merge {
        ($($field:ident => $target:expr),* $(,)?) => {
            $(if let Some(v) = args.$field.or(file.$field) { $target = v; })*
        };
    }
    merge! {
        alpha => p.alpha,
        budget => p.compression.budget,
        interval => p.compression.interval,
        warmup => p.compression.warmup,
        obs_window => p.compression.obs_window,
        sample_rate => p.sample_rate,
        sample_floor => p.sample_floor,
        max_new => p.max_new,
        seed => p.seed,
    }
    p.timings = args.timings || file.timings.unwrap_or(false);
    if args.lossless || file.lossless.unwrap_or(false) {
        p = p.lossless(weights.config.max_seq_len);
    }
    p.eos = Some(vocab.eos());
    p
}

#[derive(Serialize, Deserialize)]
struct PlanLine {
    instance_id: String,
    turn: usize,
    layer: usize,
    head: usize,
    plan: HeadPlan,
}

#[derive(Serialize)]
struct EventLine<'a> {
    instance_id: &'a str,
    turn: usize,
    event: &'a CompressionEvent,
}

#[derive(Serialize)]
struct AnswerLine<'a> {
    instance_id: &'a str,
    answers: Vec<String>,
}

pub fn run(ctx: &Context, args: RunArgs) -> Result<()> {
    ctx.require_output(&args.out)?;
    let model_path = ctx.resolve(&args.model);
    let weights = ModelWeights::load(&model_path).map_err(|e| CliError::from(e).context(model_path.display()))?;
    let vocab = load_vocab(ctx, &args.vocab)?;
    if vocab.len() > weights.config.vocab_size {
        return Err(CliError::validation(format!(
            "vocabulary of {} words exceeds model vocab_size {}",
            vocab.len(),
            weights.config.vocab_size
        )));
    }
    let file_config = match &args.config {
        Some(p) => serde_json::from_str(&ctx.read_to_string(p)?).map_err(|e| CliError::from(e).context(p.display()))?,
        None => RunConfig::default(),
    };
    let params = session_params(&args, file_config, &weights, &vocab);
    params.validate(&weights)?;
    let instances: Vec<DialogueInstance> = ctx.read_jsonl(&args.instances)?;
    for inst in &instances {
        let report = validate_instance(inst);
        if !report.is_valid() {
            return Err(CliError::validation(format!("instance {}: {:?}", inst.id, report.violations)));
        }
    }
    info!("running {} instances in {:?} mode", instances.len(), params.mode);
    let outcomes: Vec<SessionOutcome> = instances
        .par_iter()
        .map(|inst| run_session(&weights, inst, &vocab, &params).map_err(|e| CliError::from(e).context(&inst.id)))
        .collect::<Result<_>>()?;

    if let Some(path) = &args.metrics {
        let records: Vec<MetricsRecord> = outcomes.iter().map(|o| o.metrics.clone()).collect();
        let mut buf = Vec::new();
        metrics::write_json(&records, &mut buf)?;
        ctx.write(path, &buf)?;
    }
    if let Some(path) = &args.events {
        let lines: Vec<EventLine> = outcomes
            .iter()
            .flat_map(|o| {
                o.events.iter().map(|(turn, event)| EventLine { instance_id: &o.transcript.instance_id, turn: *turn, event })
            })
            .collect();
        ctx.write(path, &jsonl(&lines)?)?;
    }
    if let Some(path) = &args.plans {
        let lines: Vec<PlanLine> = outcomes
            .iter()
            .flat_map(|o| {
                o.plans.iter().map(|r: &PlanRecord| PlanLine {
                    instance_id: o.transcript.instance_id.clone(),
                    turn: r.turn,
                    layer: r.layer,
                    head: r.head,
                    plan: r.plan.clone(),
                })
            })
            .collect();
        ctx.write(path, &jsonl(&lines)?)?;
    }
    if let Some(path) = &args.answers {
        let lines: Vec<AnswerLine> = outcomes
            .iter()
            .map(|o| AnswerLine {
                instance_id: &o.transcript.instance_id,
                answers: o.transcript.turns.iter().map(|t| vocab.detokenize(&t.answer_tokens)).collect(),
            })
            .collect();
        ctx.write(path, &jsonl(&lines)?)?;
    }
    let transcripts: Vec<&Transcript> = outcomes.iter().map(|o| &o.transcript).collect();
    ctx.emit_primary(&args.out, &jsonl(&transcripts)?)
}

/// Mean overlap between each head's lines in consecutive turns, keyed by
/// the later turn.
fn segment_overlap_series(plans: &[&PlanLine]) -> Result<Vec<(f64, f64)>> {
    let mut by_head: BTreeMap<(usize, usize), BTreeMap<usize, &HeadPlan>> = BTreeMap::new();
    for p in plans {
        by_head.entry((p.layer, p.head)).or_default().insert(p.turn, &p.plan);
    }
    let mut per_turn: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for turns in by_head.values() {
        let ordered: Vec<(&usize, &&HeadPlan)> = turns.iter().collect();
        for pair in ordered.windows(2) {
            let (&(_, first), &(&t, second)) = (&pair[0], &pair[1]);
            if second.is_empty() {
                continue;
            }
            let entry = per_turn.entry(t).or_default();
            entry.0 += segment_overlap(first, second)?;
            entry.1 += 1;
        }
    }
    Ok(per_turn.into_iter().map(|(t, (sum, n))| (t as f64, sum / n as f64)).collect())
}

pub fn analyze(ctx: &Context, args: AnalyzeArgs) -> Result<()> {
    ctx.require_output(&args.out)?;
    let transcripts: Vec<Transcript> = ctx.read_jsonl(&args.transcripts)?;
    let plans: Vec<PlanLine> = match &args.plans {
        Some(p) => ctx.read_jsonl(p)?,
        None => Vec::new(),
    };
    let mut records = Vec::with_capacity(transcripts.len());
    for t in &transcripts {
        let mut record = t.metrics()?;
        if !args.which.contains(&Analysis::Scores) {
            record.turn_scores.clear();
        }
        if !args.which.contains(&Analysis::Ops) {
            record.op_counts.clear();
            record.wall_ms.clear();
        }
        if args.which.contains(&Analysis::SegmentOverlap) {
            let mine: Vec<&PlanLine> = plans.iter().filter(|p| p.instance_id == t.instance_id).collect();
            let series = segment_overlap_series(&mine)?;
            if !series.is_empty() {
                record.series.insert("segment_overlap".into(), series);
            }
        }
        record.validate().map_err(CliError::runtime)?;
        records.push(record);
    }
    let mut buf = Vec::new();
    match args.format {
        Format::Csv => metrics::write_csv(&records, &mut buf)?,
        Format::Json => metrics::write_json(&records, &mut buf)?,
    }
    ctx.emit_primary(&args.out, &buf)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BlockFile {
    Rows(Vec<Vec<f64>>),
    WithAlpha { alpha: Option<f64>, rows: Vec<Vec<f64>> },
}

#[derive(Serialize)]
struct LineReport {
    which: &'static str,
    alpha: f64,
    n_new: usize,
    n_total: usize,
    cost: usize,
    lines: usize,
    slashes: Vec<usize>,
    verticals: Vec<usize>,
    coverage: f64,
}

impl LineReport {
    fn new(which: &'static str, alpha: f64, block: &AttentionBlock, plan: &HeadPlan) -> Self {
        Self {
            which,
            alpha,
            n_new: plan.n_new,
            n_total: plan.n_total,
            cost: plan.cost(),
            lines: plan.line_count(),
            slashes: plan.slashes.iter().copied().collect(),
            verticals: plan.verticals.iter().copied().collect(),
            coverage: coverage_ratio(block, plan),
        }
    }
}

pub fn oracle(ctx: &Context, args: OracleArgs) -> Result<()> {
    ctx.require_output(&args.out)?;
    let mut report = match args.which {
        OracleKind::MinLines | OracleKind::Greedy => {
            let path = args.block.as_ref().ok_or_else(|| CliError::validation("--block is required"))?;
            let parsed: BlockFile =
                serde_json::from_str(&ctx.read_to_string(path)?).map_err(|e| CliError::from(e).context(path.display()))?;
            let (file_alpha, rows) = match parsed {
                BlockFile::Rows(rows) => (None, rows),
                BlockFile::WithAlpha { alpha, rows } => (alpha, rows),
            };
            let alpha = args.alpha.or(file_alpha).unwrap_or(0.955);
            let block = AttentionBlock::new(Matrix::from_rows(&rows)?)?;
            let report = if args.which == OracleKind::MinLines {
                LineReport::new("min-lines", alpha, &block, &brute_force_min_lines(&block, alpha)?.plan)
            } else {
                let rows = BlockRows::from_block(&block);
                let plan = greedy_select_lines(&rows, &line_sums_rows(&rows), alpha)?;
                LineReport::new("greedy", alpha, &block, &plan)
            };
            serde_json::to_string(&report)?
        }
        OracleKind::Validate => {
            let path = args.instances.as_ref().ok_or_else(|| CliError::validation("--instances is required"))?;
            let instances: Vec<DialogueInstance> = ctx.read_jsonl(path)?;
            let reports: Vec<serde_json::Value> = instances
                .iter()
                .map(|inst| {
                    let r = validate_instance(inst);
                    serde_json::json!({ "instance_id": inst.id, "valid": r.is_valid(), "violations": r.violations })
                })
                .collect();
            serde_json::to_string(&serde_json::json!({ "which": "validate", "instances": reports }))?
        }
    };
    report.push('\n');
    ctx.emit_primary(&args.out, report.as_bytes())
}
