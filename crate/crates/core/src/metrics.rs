//! Task scores, attention diagnostics and CSV/JSON emission.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compress::{self, CompressError};
use crate::sparsify::{line_sums, HeadPlan, LineKind};
use crate::tensor::{AttentionBlock, Matrix};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("plans cover different blocks: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Harmonic mean of bag-of-tokens precision and recall.
pub fn f1<T: Eq + Hash>(prediction: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in prediction {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return Ok(0.0);
    }
    let p = common as f64 / prediction.len() as f64;
    let r = common as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS length over reference length (recall form).
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(lcs_len(candidate, reference) as f64 / reference.len() as f64)
}

/// Share of reference labels matched at the same index; missing predictions
/// count as wrong and extra ones are ignored.
pub fn accuracy<T: Eq>(prediction: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let correct = reference.iter().zip(prediction).filter(|(r, p)| r == p).count();
    Ok(correct as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMetric {
    F1,
    RougeL,
    Accuracy,
}

impl TaskMetric {
    pub fn name(self) -> &'static str {
        match self {
            TaskMetric::F1 => "f1",
            TaskMetric::RougeL => "rouge_l",
            TaskMetric::Accuracy => "accuracy",
        }
    }

    pub fn score<T: Eq + Hash>(self, prediction: &[T], reference: &[T]) -> Result<f64> {
        match self {
            TaskMetric::F1 => f1(prediction, reference),
            TaskMetric::RougeL => rouge_l(prediction, reference),
            TaskMetric::Accuracy => accuracy(prediction, reference),
        }
    }
}

/// The `k` heaviest lines of a full block, slashes and verticals ranked
/// together (ties: verticals first, then smaller index).
pub fn top_lines(block: &AttentionBlock, k: usize) -> HeadPlan {
    let sums = line_sums(block);
    let mut all: Vec<_> = sums.slashes.into_iter().chain(sums.verticals).collect();
    all.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.kind.cmp(&b.kind)));
    let mut plan = HeadPlan::empty(block.n_new, block.n_total);
    for line in all.into_iter().take(k) {
        match line.kind {
            LineKind::Slash(d) => plan.slashes.insert(d),
            LineKind::Vertical(c) => plan.verticals.insert(c),
        };
    }
    plan
}

/// Mass of the union of a plan's lines over the block mass, summing each
/// covered cell once.
pub fn union_mass_ratio(block: &AttentionBlock, plan: &HeadPlan) -> f64 {
    let mut covered = 0.0;
    let mut total = 0.0;
    for r in 0..block.n_new {
        let g = block.global_row(r);
        for c in 0..=g {
            let w = block.weights.get(r, c);
            total += w;
            if plan.verticals.contains(&c) || plan.slashes.contains(&(g - c)) {
                covered += w;
            }
        }
    }
    if total > 0.0 {
        covered / total
    } else {
        0.0
    }
}

/// For each `eta`, the union mass of the top `ceil(eta * 2n)` lines,
/// averaged over the given heads.
pub fn recovery_curve(blocks: &[AttentionBlock], etas: &[f64]) -> Result<Vec<(f64, f64)>> {
    if blocks.is_empty() {
        return Err(MetricError::InvalidInput("no blocks".into()));
    }
    if etas.iter().any(|e| !(0.0..=1.0).contains(e)) {
        return Err(MetricError::InvalidInput("eta outside [0, 1]".into()));
    }
    Ok(etas
        .iter()
        .map(|&eta| {
            let mut sum = 0.0;
            for block in blocks {
                let lines = 2 * block.n_total;
                let k = ((eta * lines as f64) - 1e-9).ceil().max(0.0) as usize;
                sum += union_mass_ratio(block, &top_lines(block, k.min(lines)));
            }
            (eta, sum / blocks.len() as f64)
        })
        .collect())
}

fn set_overlap<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> (usize, usize) {
    let inter = a.intersection(b).count();
    (inter, a.len() + b.len() - inter)
}

/// Shared lines over the union of lines of two plans on equally sized blocks.
pub fn line_overlap_ratio(a: &HeadPlan, b: &HeadPlan) -> Result<f64> {
    if (a.n_new, a.n_total) != (b.n_new, b.n_total) {
        return Err(MetricError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.n_new, a.n_total, b.n_new, b.n_total
        )));
    }
    let (si, su) = set_overlap(&a.slashes, &b.slashes);
    let (vi, vu) = set_overlap(&a.verticals, &b.verticals);
    if su + vu == 0 {
        return Ok(1.0);
    }
    Ok((si + vi) as f64 / (su + vu) as f64)
}

/// Share of `second`'s lines that also occur in `first`. Lines are compared
/// by kind and global index, so the blocks may differ in size.
pub fn segment_overlap(first: &HeadPlan, second: &HeadPlan) -> Result<f64> {
    let l2: BTreeSet<LineKind> = second.lines().collect();
    if l2.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let hits = first.lines().filter(|l| l2.contains(l)).count();
    Ok(hits as f64 / l2.len() as f64)
}

/// Ground-truth top-`budget` inputs of each of `n_blocks` equal slices of
/// the output rows. `output_rows[h]` holds head `h`'s rows over all keys.
pub fn block_selections(
    output_rows: &[Matrix],
    inputs: &[usize],
    n_blocks: usize,
    budget: usize,
) -> Result<Vec<Vec<usize>>> {
    let n_out = output_rows.first().map_or(0, Matrix::rows);
    if n_blocks == 0 || n_out < n_blocks || !n_out.is_multiple_of(n_blocks) {
        return Err(MetricError::InvalidInput(format!(
            "{n_out} output rows cannot form {n_blocks} equal blocks"
        )));
    }
    let size = n_out / n_blocks;
    (0..n_blocks)
        .map(|b| {
            let rows: Vec<usize> = (b * size..(b + 1) * size).collect();
            let slices: Vec<Matrix> = output_rows.iter().map(|m| m.select_rows(&rows)).collect();
            Ok(compress::ground_truth_top_b(&slices, inputs, budget)?)
        })
        .collect()
}

/// Pairwise overlap rates of per-block selections.
pub fn block_overlap_series(selections: &[Vec<usize>], budget: usize) -> Result<Matrix> {
    let n = selections.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, compress::overlap_rate(&selections[i], &selections[j], budget)?);
        }
    }
    Ok(out)
}

/// Means of the overlap matrix grouped by block distance `|i - j|`.
pub fn overlap_by_distance(overlaps: &Matrix) -> Vec<(usize, f64)> {
    let n = overlaps.rows();
    (0..n)
        .map(|dist| {
            let vals: Vec<f64> = (0..n - dist).map(|i| overlaps.get(i, i + dist)).collect();
            (dist, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnScore {
    pub turn: usize,
    pub metric: TaskMetric,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub instance_id: String,
    pub turn_scores: Vec<TurnScore>,
    /// Named diagnostic series of `(x, y)` points.
    pub series: BTreeMap<String, Vec<(f64, f64)>>,
    /// Named per-turn operation counts.
    pub op_counts: BTreeMap<String, Vec<u64>>,
    pub wall_ms: Vec<f64>,
}

impl MetricsRecord {
    pub fn new(instance_id: impl Into<String>) -> Self {
        Self { instance_id: instance_id.into(), ..Self::default() }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for s in &self.turn_scores {
            if !(0.0..=1.0).contains(&s.score) {
                return Err(format!("turn {} score {} outside [0, 1]", s.turn, s.score));
            }
        }
        for (name, points) in &self.series {
            if points.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(format!("series {name} x values not strictly increasing"));
            }
        }
        Ok(())
    }

    fn csv_rows(&self) -> Vec<(String, f64, f64)> {
        let mut rows = Vec::new();
        for s in &self.turn_scores {
            rows.push((s.metric.name().to_string(), s.turn as f64, s.score));
        }
        for (name, points) in &self.series {
            rows.extend(points.iter().map(|&(x, y)| (name.clone(), x, y)));
        }
        for (name, counts) in &self.op_counts {
            rows.extend(counts.iter().enumerate().map(|(i, &c)| (name.clone(), (i + 1) as f64, c as f64)));
        }
        for (i, &ms) in self.wall_ms.iter().enumerate() {
            rows.push(("wall_ms".into(), (i + 1) as f64, ms));
        }
        rows
    }
}

/// One `instance,metric,x,y` row per point, in record order.
pub fn write_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["instance", "metric", "x", "y"])?;
    for record in records {
        for (metric, x, y) in record.csv_rows() {
            w.write_record([record.instance_id.as_str(), &metric, &x.to_string(), &y.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(records: &[MetricsRecord], mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, records)?;
    writeln!(out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1(&words("a b c"), &words("a b c")).unwrap(), 1.0);
        assert_eq!(f1(&words("x y"), &words("a b")).unwrap(), 0.0);
        assert!((f1(&words("a b c"), &words("a b d")).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(f1(&words("a"), &[]), Err(MetricError::EmptyReference)));
        // Bag semantics: a repeated token matches once per reference copy.
        assert_eq!(f1(&words("a a"), &words("a b")).unwrap(), 0.5);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l(&words("the cat sat"), &words("the cat")).unwrap(), 1.0);
        assert_eq!(rouge_l(&words("x"), &words("a b")).unwrap(), 0.0);
        assert_eq!(lcs_len(&words("a b c d"), &words("b d a")), 2);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 5]).unwrap(), 0.75);
        assert_eq!(accuracy(&[1], &[1, 2]).unwrap(), 0.5);
    }

    fn plan(s: &[usize], v: &[usize], n_new: usize, n_total: usize) -> HeadPlan {
        let mut p = HeadPlan::empty(n_new, n_total);
        p.slashes = s.iter().copied().collect();
        p.verticals = v.iter().copied().collect();
        p
    }

    #[test]
    fn line_overlap_cases() {
        let a = plan(&[0], &[2], 2, 4);
        let b = plan(&[0, 1], &[2], 2, 4);
        assert!((line_overlap_ratio(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(line_overlap_ratio(&a, &a).unwrap(), 1.0);
        assert_eq!(line_overlap_ratio(&a, &plan(&[1], &[3], 2, 4)).unwrap(), 0.0);
        assert!(line_overlap_ratio(&a, &plan(&[0], &[2], 3, 4)).is_err());
    }

    #[test]
    fn segment_overlap_cases() {
        let c1 = plan(&[0, 5], &[1], 2, 10);
        let c2 = plan(&[0, 3], &[1, 7], 4, 12);
        assert_eq!(segment_overlap(&c1, &c2).unwrap(), 0.5);
        assert_eq!(segment_overlap(&c2, &c2).unwrap(), 1.0);
        assert_eq!(segment_overlap(&plan(&[9], &[], 2, 10), &c2).unwrap(), 0.0);
    }

    fn uniform_block(n: usize) -> AttentionBlock {
        let mut w = Matrix::zeros(n, n);
        for r in 0..n {
            for c in 0..=r {
                w.set(r, c, 1.0 / (r + 1) as f64);
            }
        }
        AttentionBlock::new(w).unwrap()
    }

    #[test]
    fn recovery_endpoints_and_monotone() {
        let blocks = vec![uniform_block(6), uniform_block(9)];
        let etas: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let curve = recovery_curve(&blocks, &etas).unwrap();
        assert_eq!(curve[0].1, 0.0);
        assert_eq!(curve[10].1, 1.0);
        assert!(curve.windows(2).all(|w| w[0].1 <= w[1].1 + 1e-15));
    }

    #[test]
    fn block_overlap_trivia() {
        let one = block_overlap_series(&[vec![1, 2]], 2).unwrap();
        assert_eq!(one.data(), &[1.0]);
        let same = block_overlap_series(&[vec![1, 2], vec![1, 2], vec![1, 2]], 2).unwrap();
        assert!(same.data().iter().all(|&v| v == 1.0));
        let by = overlap_by_distance(&same);
        assert_eq!(by.len(), 3);
    }

    #[test]
    fn csv_layout() {
        let mut r = MetricsRecord::new("inst,1");
        r.turn_scores.push(TurnScore { turn: 1, metric: TaskMetric::F1, score: 0.5 });
        r.series.insert("recovery".into(), vec![(0.1, 0.9)]);
        r.op_counts.insert("prefill_ops".into(), vec![7]);
        let mut buf = Vec::new();
        write_csv(&[r], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "instance,metric,x,y\n\"inst,1\",f1,1,0.5\n\"inst,1\",recovery,0.1,0.9\n\"inst,1\",prefill_ops,1,7\n"
        );
    }
}
