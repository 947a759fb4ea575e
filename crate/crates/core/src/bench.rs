//! Multi-turn long-context instances built from local JSONL corpora.
//!
//! Records are cut into blank-line paragraphs, spread over turns and mixed
//! with unrelated paragraphs. Each turn records where its query sits among
//! the segments and which turns hold the context it needs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::TaskMetric;
use crate::model::TokenId;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("pool has {have} usable items, need {need}")]
    PoolTooSmall { have: usize, need: usize },
    #[error("pool has {0} examples, need at least 4")]
    TooFewExamples(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryPosition {
    Begin,
    Middle,
    End,
}

impl QueryPosition {
    pub const ALL: [QueryPosition; 3] = [QueryPosition::Begin, QueryPosition::Middle, QueryPosition::End];

    /// Label implied by a query placed before segment `index` of `n_segments`.
    pub fn classify(index: usize, n_segments: usize) -> Option<Self> {
        match (index, n_segments) {
            (_, 0) => None,
            (0, _) => Some(QueryPosition::Begin),
            (i, n) if i == n => Some(QueryPosition::End),
            (i, n) if i < n => Some(QueryPosition::Middle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Qa,
    Summarization,
    FewShot,
}

impl TaskKind {
    pub fn metric(self) -> TaskMetric {
        match self {
            TaskKind::Qa => TaskMetric::F1,
            TaskKind::Summarization => TaskMetric::RougeL,
            TaskKind::FewShot => TaskMetric::Accuracy,
        }
    }
}

/// Where a segment came from: paragraph `paragraph` of record `record` in
/// the named pool (`qa`, `doc`, `example` or `noise`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub pool: String,
    pub record: usize,
    pub paragraph: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub source: SourceRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub context_segments: Vec<Segment>,
    pub query: String,
    pub reference_answer: String,
    pub query_position: QueryPosition,
    /// The query precedes `context_segments[query_index]` (or ends the turn).
    pub query_index: usize,
    /// 1-based turns whose segments hold this query's context.
    pub relevance: BTreeSet<usize>,
}

impl DialogueTurn {
    /// Segments and query in reading order, separated by blank lines.
    pub fn prompt_text(&self) -> String {
        let mut parts: Vec<&str> = self.context_segments.iter().map(|s| s.text.as_str()).collect();
        parts.insert(self.query_index.min(parts.len()), &self.query);
        parts.join("\n\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueInstance {
    pub id: String,
    pub task: TaskKind,
    pub turns: Vec<DialogueTurn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub context: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SumRecord {
    pub document: String,
    pub summary: String,
}

/// A few-shot record: `context` holds blank-line separated examples.
pub type FewShotRecord = QaRecord;

fn blank_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\n[ \t]*\n").expect("static pattern"))
}

/// Non-empty blank-line separated blocks, trimmed.
pub fn paragraphs(text: &str) -> Vec<String> {
    blank_line()
        .split(text)
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| BenchError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: std::io::Write>(items: &[T], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        writeln!(out)?;
    }
    Ok(())
}

fn noise_paragraphs(pool: &[String], skip: &BTreeSet<usize>, pool_name: &str) -> Vec<Segment> {
    pool.iter()
        .enumerate()
        .filter(|(i, _)| !skip.contains(i))
        .flat_map(|(i, text)| {
            paragraphs(text).into_iter().enumerate().map(move |(p, text)| Segment {
                text,
                source: SourceRef { pool: pool_name.to_string(), record: i, paragraph: p },
            })
        })
        .collect()
}

/// Inserts up to two random noise paragraphs at random slots of each turn.
fn inject_noise(turns: &mut [Vec<Segment>], noise: &[Segment], rng: &mut ChaCha8Rng) {
    if noise.is_empty() {
        return;
    }
    for segments in turns.iter_mut() {
        let k = rng.gen_range(1..=2);
        for seg in noise.choose_multiple(rng, k) {
            let at = rng.gen_range(0..=segments.len());
            segments.insert(at, seg.clone());
        }
    }
}

fn make_turn(
    mut segments: Vec<Segment>,
    query: String,
    reference_answer: String,
    position: QueryPosition,
    relevance: BTreeSet<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<DialogueTurn> {
    if segments.is_empty() {
        return Err(BenchError::InvalidInput("turn has no context".into()));
    }
    if position == QueryPosition::Middle && segments.len() == 1 {
        let words: Vec<&str> = segments[0].text.split_whitespace().collect();
        if words.len() < 2 {
            return Err(BenchError::InvalidInput("single one-word segment cannot hold a middle query".into()));
        }
        let mid = words.len() / 2;
        let tail = Segment { text: words[mid..].join(" "), source: segments[0].source.clone() };
        segments[0].text = words[..mid].join(" ");
        segments.push(tail);
    }
    let n = segments.len();
    let query_index = match position {
        QueryPosition::Begin => 0,
        QueryPosition::End => n,
        QueryPosition::Middle => rng.gen_range(1..n),
    };
    Ok(DialogueTurn {
        context_segments: segments,
        query,
        reference_answer,
        query_position: position,
        query_index,
        relevance,
    })
}

/// Turns `1..=j` that receive record `j`'s paragraphs (at least one, and
/// turn `j` itself when `must_include_own`).
fn spread(n_paragraphs: usize, j: usize, must_include_own: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let size = rng.gen_range(1..=j.min(n_paragraphs));
    let mut turns: Vec<usize> = if must_include_own {
        let mut t: Vec<usize> = rand::seq::index::sample(rng, j - 1, size - 1).into_iter().map(|t| t + 1).collect();
        t.push(j);
        t
    } else {
        rand::seq::index::sample(rng, j, size).into_iter().map(|t| t + 1).collect()
    };
    turns.sort_unstable();
    turns
}

/// QA dialogue: turn `j` asks record `j`'s question; that record's
/// paragraphs are spread over turns up to `j`.
pub fn build_qa_instance(
    id: &str,
    qa_pool: &[QaRecord],
    n_turns: usize,
    positions: &[QueryPosition],
    noise_pool: &[String],
    seed: u64,
) -> Result<DialogueInstance> {
    if n_turns == 0 || positions.len() != n_turns {
        return Err(BenchError::InvalidInput(format!(
            "{} positions for {n_turns} turns",
            positions.len()
        )));
    }
    let usable: Vec<usize> = (0..qa_pool.len())
        .filter(|&i| !paragraphs(&qa_pool[i].context).is_empty())
        .collect();
    if usable.len() < n_turns {
        return Err(BenchError::PoolTooSmall { have: usable.len(), need: n_turns });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<usize> = usable.choose_multiple(&mut rng, n_turns).copied().collect();
    let mut turn_segments: Vec<Vec<Segment>> = vec![Vec::new(); n_turns];
    let mut relevance = vec![BTreeSet::new(); n_turns];
    // Later records go first so a turn nobody else reached gets its own record.
    for (j0, &rec) in picked.iter().enumerate().rev() {
        let paras = paragraphs(&qa_pool[rec].context);
        let targets = spread(paras.len(), j0 + 1, turn_segments[j0].is_empty(), &mut rng);
        let n_paras = paras.len();
        for (p, text) in paras.into_iter().enumerate() {
            // Every target turn receives at least one paragraph.
            let t = targets[p * targets.len() / n_paras];
            turn_segments[t - 1].push(Segment {
                text,
                source: SourceRef { pool: "qa".into(), record: rec, paragraph: p },
            });
        }
        relevance[j0] = targets.into_iter().collect();
    }
    for segments in &mut turn_segments {
        segments.shuffle(&mut rng);
    }
    inject_noise(&mut turn_segments, &noise_paragraphs(noise_pool, &BTreeSet::new(), "noise"), &mut rng);
    let turns = turn_segments
        .into_iter()
        .zip(picked.iter())
        .zip(positions)
        .zip(relevance)
        .map(|(((segs, &rec), &pos), rel)| {
            let r = &qa_pool[rec];
            make_turn(segs, r.question.clone(), r.answer.clone(), pos, rel, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DialogueInstance { id: id.to_string(), task: TaskKind::Qa, turns })
}

/// Two-turn summarization: document A sits in turn 1, document B is split
/// over both turns; the other documents supply noise.
pub fn build_sum_instance(id: &str, doc_pool: &[SumRecord], seed: u64) -> Result<DialogueInstance> {
    let usable: Vec<usize> = (0..doc_pool.len())
        .filter(|&i| !paragraphs(&doc_pool[i].document).is_empty())
        .collect();
    if usable.len() < 2 {
        return Err(BenchError::PoolTooSmall { have: usable.len(), need: 2 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<usize> = usable.choose_multiple(&mut rng, 2).copied().collect();
    let (a, b) = (picked[0], picked[1]);
    let seg = |rec: usize, p: usize, text: String| Segment {
        text,
        source: SourceRef { pool: "doc".into(), record: rec, paragraph: p },
    };
    let mut turns: Vec<Vec<Segment>> = vec![Vec::new(), Vec::new()];
    turns[0].extend(paragraphs(&doc_pool[a].document).into_iter().enumerate().map(|(p, t)| seg(a, p, t)));
    let b_paras = paragraphs(&doc_pool[b].document);
    let split = b_paras.len() / 2;
    for (p, t) in b_paras.into_iter().enumerate() {
        turns[usize::from(p >= split)].push(seg(b, p, t));
    }
    let b_relevance: BTreeSet<usize> = if split == 0 { [2].into() } else { [1, 2].into() };
    let docs: Vec<String> = doc_pool.iter().map(|d| d.document.clone()).collect();
    inject_noise(&mut turns, &noise_paragraphs(&docs, &picked.iter().copied().collect(), "doc"), &mut rng);
    let queries = [
        ("Summarize the first document.", a, BTreeSet::from([1])),
        ("Summarize the second document.", b, b_relevance),
    ];
    let turns = turns
        .into_iter()
        .zip(queries)
        .map(|(segs, (q, rec, rel))| {
            let pos = *QueryPosition::ALL.choose(&mut rng).expect("non-empty");
            make_turn(segs, q.to_string(), doc_pool[rec].summary.clone(), pos, rel, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DialogueInstance { id: id.to_string(), task: TaskKind::Summarization, turns })
}

/// Two-turn few-shot dialogue: the pool's examples are shuffled and split
/// between the turns, each kept whole; both turns ask a pool question.
pub fn build_fewshot_instance(id: &str, example_pool: &[FewShotRecord], seed: u64) -> Result<DialogueInstance> {
    let examples: Vec<Segment> = example_pool
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            paragraphs(&r.context).into_iter().enumerate().map(move |(p, text)| Segment {
                text,
                source: SourceRef { pool: "example".into(), record: i, paragraph: p },
            })
        })
        .collect();
    if examples.len() < 4 {
        return Err(BenchError::TooFewExamples(examples.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = examples;
    examples.shuffle(&mut rng);
    let split = rng.gen_range(2..=examples.len() - 2);
    let second = examples.split_off(split);
    let relevance = [BTreeSet::from([1]), BTreeSet::from([1, 2])];
    let turns = [examples, second]
        .into_iter()
        .zip(relevance)
        .map(|(segs, rel)| {
            let record = example_pool.choose(&mut rng).expect("non-empty");
            let pos = *QueryPosition::ALL.choose(&mut rng).expect("non-empty");
            make_turn(segs, record.question.clone(), record.answer.clone(), pos, rel, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DialogueInstance { id: id.to_string(), task: TaskKind::FewShot, turns })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_instance(instance: &DialogueInstance) -> ValidationReport {
    let mut v = Vec::new();
    if instance.id.is_empty() {
        v.push("empty id".to_string());
    }
    if instance.turns.is_empty() {
        v.push("no turns".to_string());
    }
    if matches!(instance.task, TaskKind::Summarization | TaskKind::FewShot) && instance.turns.len() != 2 {
        v.push(format!("{:?} instance has {} turns, expected 2", instance.task, instance.turns.len()));
    }
    for (j0, turn) in instance.turns.iter().enumerate() {
        let j = j0 + 1;
        let n = turn.context_segments.len();
        if n == 0 {
            v.push(format!("turn {j}: no context segments"));
        }
        if turn.context_segments.iter().any(|s| s.text.trim().is_empty()) {
            v.push(format!("turn {j}: empty segment"));
        }
        if turn.query.trim().is_empty() {
            v.push(format!("turn {j}: empty query"));
        }
        if turn.reference_answer.trim().is_empty() {
            v.push(format!("turn {j}: empty reference answer"));
        }
        if turn.query_index > n {
            v.push(format!("turn {j}: query index {} beyond {n} segments", turn.query_index));
        } else if QueryPosition::classify(turn.query_index, n) != Some(turn.query_position) {
            v.push(format!(
                "turn {j}: label {:?} does not match query index {} of {n}",
                turn.query_position, turn.query_index
            ));
        }
        if turn.relevance.is_empty() {
            v.push(format!("turn {j}: empty relevance"));
        }
        if let Some(&bad) = turn.relevance.iter().find(|&&t| t == 0 || t > j) {
            v.push(format!("turn {j}: relevance names turn {bad}"));
        }
    }
    ValidationReport { violations: v }
}

/// Query position and relevance-size counts over a set of instances.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub positions: BTreeMap<QueryPosition, usize>,
    pub relevance_sizes: BTreeMap<usize, usize>,
}

pub fn diversity(instances: &[DialogueInstance]) -> DiversityReport {
    let mut r = DiversityReport::default();
    for turn in instances.iter().flat_map(|i| &i.turns) {
        *r.positions.entry(turn.query_position).or_default() += 1;
        *r.relevance_sizes.entry(turn.relevance.len()).or_default() += 1;
    }
    r
}

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

/// Whitespace tokenizer over a fixed word list; unknown words map to `<unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    unk: TokenId,
    eos: TokenId,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(BenchError::InvalidInput(format!("vocab entry {i} is not a single word")));
            }
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(BenchError::InvalidInput(format!("duplicate vocab entry {w:?}")));
            }
        }
        let unk = *index.get(UNK).ok_or_else(|| BenchError::InvalidInput("vocab lacks <unk>".into()))?;
        let eos = *index.get(EOS).ok_or_else(|| BenchError::InvalidInput("vocab lacks <eos>".into()))?;
        Ok(Self { words, index, unk, eos })
    }

    /// `<unk>`, `<eos>`, then the most frequent words of `texts` (ties in
    /// lexicographic order), at most `max_size` entries in total.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        counts.remove(UNK);
        counts.remove(EOS);
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut words = vec![UNK.to_string(), EOS.to_string()];
        words.extend(ranked.into_iter().take(max_size.saturating_sub(2)).map(|(w, _)| w.to_string()));
        Self::new(words)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.words)?)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.index.get(w).copied().unwrap_or(self.unk)).collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i as usize).map_or(UNK, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

const COLORS: &[&str] = &["red", "blue", "green", "amber", "violet", "silver", "black", "white"];
const OBJECTS: &[&str] = &["key", "lamp", "book", "coin", "map", "ring", "cup", "box"];
const PLACES: &[&str] = &["attic", "garden", "cellar", "library", "kitchen", "harbor", "tower", "barn"];
const FILLER: &[&str] = &[
    "the", "weather", "was", "calm", "and", "people", "walked", "slowly", "near", "river", "while",
    "birds", "sang", "over", "old", "roofs", "of", "town", "a", "market", "opened", "early", "with",
    "fresh", "bread", "many", "visitors", "came", "from", "north", "south", "hills",
];
const LABELS: &[&str] = &["positive", "negative", "neutral"];

fn filler_sentence(rng: &mut ChaCha8Rng, words: usize) -> String {
    let mut s: Vec<&str> = (0..words).map(|_| *FILLER.choose(rng).expect("non-empty")).collect();
    s.push(".");
    s.join(" ")
}

/// Templated QA records: one paragraph plants "the C O is stored in the P",
/// the question asks for the place. Color-object pairs are distinct across
/// the first 64 records, so those questions are unambiguous.
pub fn synthetic_qa_corpus(n: usize, paragraphs_per_record: usize, seed: u64) -> Vec<QaRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = paragraphs_per_record.max(1);
    let pairs = COLORS.len() * OBJECTS.len();
    let mut order: Vec<usize> = (0..pairs).collect();
    order.shuffle(&mut rng);
    (0..n)
        .map(|i| {
            let pair = order[i % pairs];
            let color = COLORS[pair / OBJECTS.len()];
            let object = OBJECTS[pair % OBJECTS.len()];
            let place = *PLACES.choose(&mut rng).expect("non-empty");
            let planted = rng.gen_range(0..per);
            let paras: Vec<String> = (0..per)
                .map(|p| {
                    let mut s = filler_sentence(&mut rng, 8);
                    if p == planted {
                        s = format!("{s} the {color} {object} is stored in the {place} .");
                    }
                    s
                })
                .collect();
            QaRecord {
                context: paras.join("\n\n"),
                question: format!("where is the {color} {object} stored ?"),
                answer: place.to_string(),
            }
        })
        .collect()
}

/// Templated documents whose summary lists each paragraph's topic place.
pub fn synthetic_sum_corpus(n: usize, paragraphs_per_doc: usize, seed: u64) -> Vec<SumRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let places: Vec<&str> =
                (0..paragraphs_per_doc.max(1)).map(|_| *PLACES.choose(&mut rng).expect("non-empty")).collect();
            let paras: Vec<String> = places
                .iter()
                .map(|p| format!("this part is about the {p} . {}", filler_sentence(&mut rng, 8)))
                .collect();
            SumRecord { document: paras.join("\n\n"), summary: format!("about the {}", places.join(" and the ")) }
        })
        .collect()
}

/// Few-shot records: each example maps a color-object pair to a label.
pub fn synthetic_fewshot_corpus(n: usize, examples_per_record: usize, seed: u64) -> Vec<FewShotRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label_of = |c: &str| LABELS[COLORS.iter().position(|x| *x == c).unwrap_or(0) % LABELS.len()];
    (0..n)
        .map(|_| {
            let examples: Vec<String> = (0..examples_per_record.max(1))
                .map(|_| {
                    let c = *COLORS.choose(&mut rng).expect("non-empty");
                    let o = *OBJECTS.choose(&mut rng).expect("non-empty");
                    format!("input : {c} {o} label : {}", label_of(c))
                })
                .collect();
            let c = *COLORS.choose(&mut rng).expect("non-empty");
            let o = *OBJECTS.choose(&mut rng).expect("non-empty");
            FewShotRecord {
                context: examples.join("\n\n"),
                question: format!("input : {c} {o} label :"),
                answer: label_of(c).to_string(),
            }
        })
        .collect()
}

/// Filler paragraphs for noise injection.
pub fn synthetic_noise(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| filler_sentence(&mut rng, 10)).collect()
}

/// Every word the synthetic corpora can emit, plus the reserved entries.
pub fn synthetic_vocab() -> Vocab {
    let mut words = vec![UNK.to_string(), EOS.to_string()];
    let extra = [
        ".", "?", ":", "is", "stored", "in", "where", "this", "part", "about", "input", "label", "and",
        "Summarize", "first", "second", "document.",
    ];
    let mut seen = BTreeSet::new();
    for w in COLORS.iter().chain(OBJECTS).chain(PLACES).chain(FILLER).chain(LABELS).chain(&extra) {
        if seen.insert(*w) {
            words.push(w.to_string());
        }
    }
    Vocab::new(words).expect("static vocab is valid")
}
