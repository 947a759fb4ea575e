//! Online slash/vertical line selection for prefilling.
//!
//! A block of attention rows is summarised into per-line masses; the greedy
//! selector then picks lines until the selected lines recover a fraction
//! `alpha` of the block's mass. Slash lines are identified by their global
//! offset `row - col` and vertical lines by their key column, so a plan
//! computed on sampled rows applies directly to the full block.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, AttentionBlock, Matrix, TensorError};

/// Relative slack used in every "covered mass >= alpha * total" comparison.
pub const COVERAGE_EPS: f64 = 1e-12;

/// Largest key count the exact oracle accepts.
pub const BRUTE_FORCE_MAX_KEYS: usize = 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparsifyError {
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("block has no query rows")]
    EmptyBlock,
    #[error("invalid sampling parameters: {0}")]
    InvalidSampling(String),
    #[error("exact search supports at most {max} keys, got {n_total}")]
    InstanceTooLarge { n_total: usize, max: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SparsifyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "lowercase")]
pub enum LineKind {
    /// Key column `c`.
    Vertical(usize),
    /// Diagonal with global offset `d = row - col`.
    Slash(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub kind: LineKind,
    /// Summed attention mass on the line.
    pub weight: f64,
    /// Number of causal cells on the line within the block.
    pub length: usize,
    /// Largest single cell on the line.
    pub max_cell: f64,
}

/// Length of vertical line `c` in a full `n_new x n_total` causal block.
pub fn vertical_len(n_new: usize, n_total: usize, c: usize) -> usize {
    n_new.min(n_total.saturating_sub(c))
}

/// Length of slash line `d` in a full `n_new x n_total` causal block.
pub fn slash_len(n_new: usize, n_total: usize, d: usize) -> usize {
    n_new.min(n_total.saturating_sub(d))
}

/// Selected lines for one head, expressed against the full block
/// (`n_new` query rows ending at key `n_total - 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPlan {
    pub n_new: usize,
    pub n_total: usize,
    pub slashes: BTreeSet<usize>,
    pub verticals: BTreeSet<usize>,
    /// Exact covered fraction of the block the plan was selected on.
    pub coverage: f64,
    /// Final value of the greedy running counter (approximate covered mass).
    pub approx_sum: f64,
}

impl HeadPlan {
    pub fn empty(n_new: usize, n_total: usize) -> Self {
        Self {
            n_new,
            n_total,
            slashes: BTreeSet::new(),
            verticals: BTreeSet::new(),
            coverage: 0.0,
            approx_sum: 0.0,
        }
    }

    /// Every line of the block.
    pub fn full(n_new: usize, n_total: usize) -> Self {
        Self {
            slashes: (0..n_total).collect(),
            verticals: (0..n_total).collect(),
            coverage: 1.0,
            ..Self::empty(n_new, n_total)
        }
    }

    pub fn row_offset(&self) -> usize {
        self.n_total - self.n_new
    }

    pub fn is_empty(&self) -> bool {
        self.slashes.is_empty() && self.verticals.is_empty()
    }

    pub fn line_count(&self) -> usize {
        self.slashes.len() + self.verticals.len()
    }

    pub fn lines(&self) -> impl Iterator<Item = LineKind> + '_ {
        self.slashes
            .iter()
            .map(|&d| LineKind::Slash(d))
            .chain(self.verticals.iter().map(|&c| LineKind::Vertical(c)))
    }

    /// Summed full-block lengths of the selected lines (the selection cost).
    pub fn cost(&self) -> usize {
        let s: usize = self.slashes.iter().map(|&d| slash_len(self.n_new, self.n_total, d)).sum();
        let v: usize =
            self.verticals.iter().map(|&c| vertical_len(self.n_new, self.n_total, c)).sum();
        s + v
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_new > self.n_total {
            return Err(SparsifyError::InvalidPlan(format!(
                "{} rows exceed {} keys",
                self.n_new, self.n_total
            )));
        }
        if let Some(&d) = self.slashes.iter().next_back().filter(|&&d| d >= self.n_total) {
            return Err(SparsifyError::InvalidPlan(format!("slash offset {d} out of range")));
        }
        if let Some(&c) = self.verticals.iter().next_back().filter(|&&c| c >= self.n_total) {
            return Err(SparsifyError::InvalidPlan(format!("vertical column {c} out of range")));
        }
        Ok(())
    }

    /// Ascending key indices each query row attends to. A row with no
    /// selected cell falls back to its diagonal.
    pub fn row_cells(&self) -> Vec<Vec<usize>> {
        let offset = self.row_offset();
        (0..self.n_new)
            .map(|r| {
                let g = offset + r;
                let mut cells: Vec<usize> = self
                    .verticals
                    .range(..=g)
                    .copied()
                    .chain(self.slashes.range(..=g).map(|&d| g - d))
                    .collect();
                cells.sort_unstable();
                cells.dedup();
                if cells.is_empty() {
                    cells.push(g);
                }
                cells
            })
            .collect()
    }

    /// Number of scored cells when the plan is applied (after fallback).
    pub fn cell_count(&self) -> usize {
        self.row_cells().iter().map(Vec::len).sum()
    }
}

/// Attention rows at arbitrary global positions of a causal block whose query
/// rows span `row_offset..n_total`. A full block has every position.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRows {
    pub weights: Matrix,
    pub positions: Vec<usize>,
    pub n_total: usize,
    pub row_offset: usize,
}

impl BlockRows {
    pub fn from_block(block: &AttentionBlock) -> Self {
        Self {
            weights: block.weights.clone(),
            positions: (block.row_offset..block.n_total).collect(),
            n_total: block.n_total,
            row_offset: block.row_offset,
        }
    }

    pub fn n_new(&self) -> usize {
        self.n_total - self.row_offset
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.data().iter().sum()
    }

    fn sampled_row_at(&self, global: usize) -> Option<usize> {
        self.positions.binary_search(&global).ok()
    }

    /// Cells `(sample row, col)` of a line, in ascending row order.
    fn line_cells(&self, line: LineKind) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.positions.iter().enumerate().filter_map(move |(i, &g)| match line {
            LineKind::Vertical(c) => (c <= g).then_some((i, c)),
            LineKind::Slash(d) => (d <= g).then(|| (i, g - d)),
        })
    }
}

/// Per-line masses of a block, each list sorted by descending weight with
/// ties going to the smaller index.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSums {
    pub slashes: Vec<Line>,
    pub verticals: Vec<Line>,
    pub total_weight: f64,
}

fn sort_desc(lines: &mut [Line]) {
    lines.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.kind.cmp(&b.kind)));
}

pub fn line_sums_rows(block: &BlockRows) -> LineSums {
    let n = block.n_total;
    let mut slashes: Vec<Line> = (0..n)
        .map(|d| Line { kind: LineKind::Slash(d), weight: 0.0, length: 0, max_cell: 0.0 })
        .collect();
    let mut verticals: Vec<Line> = (0..n)
        .map(|c| Line { kind: LineKind::Vertical(c), weight: 0.0, length: 0, max_cell: 0.0 })
        .collect();
    for (i, &g) in block.positions.iter().enumerate() {
        let row = block.weights.row(i);
        for (c, &w) in row.iter().enumerate().take(g + 1) {
            for line in [&mut verticals[c], &mut slashes[g - c]] {
                line.weight += w;
                line.length += 1;
                if w > line.max_cell {
                    line.max_cell = w;
                }
            }
        }
    }
    sort_desc(&mut slashes);
    sort_desc(&mut verticals);
    LineSums { slashes, verticals, total_weight: block.total_weight() }
}

/// Slash and vertical masses of a full block.
pub fn line_sums(block: &AttentionBlock) -> LineSums {
    line_sums_rows(&BlockRows::from_block(block))
}

/// Exact covered mass of `plan` on `block` by inclusion–exclusion: a slash
/// and a vertical share at most one cell.
pub fn covered_mass(block: &BlockRows, plan: &HeadPlan) -> f64 {
    let mut mass = 0.0;
    for line in plan.lines() {
        for (i, c) in block.line_cells(line) {
            mass += block.weights.get(i, c);
        }
    }
    for &d in &plan.slashes {
        for &c in &plan.verticals {
            if let Some(i) = block.sampled_row_at(c + d) {
                mass -= block.weights.get(i, c);
            }
        }
    }
    mass
}

pub fn coverage_ratio_rows(block: &BlockRows, plan: &HeadPlan) -> f64 {
    if plan.is_empty() {
        return 0.0;
    }
    let total = block.total_weight();
    if total <= 0.0 {
        return 0.0;
    }
    (covered_mass(block, plan) / total).clamp(0.0, 1.0)
}

/// Fraction of the block's mass on the plan's lines.
pub fn coverage_ratio(block: &AttentionBlock, plan: &HeadPlan) -> f64 {
    coverage_ratio_rows(&BlockRows::from_block(block), plan)
}

/// Cell-level bookkeeping used when the greedy counter is not trusted:
/// exact covered mass and the number of nonzero cells still uncovered.
struct CoverTracker<'a> {
    block: &'a BlockRows,
    covered: Vec<bool>,
    mass: f64,
    uncovered_nonzero: usize,
}

impl<'a> CoverTracker<'a> {
    fn new(block: &'a BlockRows) -> Self {
        let uncovered_nonzero = block
            .positions
            .iter()
            .enumerate()
            .map(|(i, &g)| block.weights.row(i)[..=g].iter().filter(|&&w| w > 0.0).count())
            .sum();
        Self {
            block,
            covered: vec![false; block.weights.rows() * block.n_total],
            mass: 0.0,
            uncovered_nonzero,
        }
    }

    fn add(&mut self, line: LineKind) {
        for (i, c) in self.block.line_cells(line) {
            let slot = &mut self.covered[i * self.block.n_total + c];
            if !*slot {
                *slot = true;
                let w = self.block.weights.get(i, c);
                self.mass += w;
                if w > 0.0 {
                    self.uncovered_nonzero -= 1;
                }
            }
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SparsifyError::InvalidAlpha(alpha));
    }
    Ok(())
}

/// Greedy line selection over pre-sorted line sums.
///
/// Each round compares the best remaining slash and vertical by estimated
/// marginal mass per uncovered cell, `(w - ol) / (len - |other kind|)`, and
/// takes the better one. The running counter subtracts, for every new line,
/// the summed `max_cell` of the already chosen lines of the other kind; since
/// a slash meets a vertical in at most one cell, the counter never exceeds
/// the true covered mass. Once the counter fails to grow the exact covered
/// mass is consulted as well. With `alpha == 1` termination requires every
/// nonzero cell to be covered.
pub fn greedy_select_lines(block: &BlockRows, sums: &LineSums, alpha: f64) -> Result<HeadPlan> {
    check_alpha(alpha)?;
    let mut plan = HeadPlan::empty(block.n_new(), block.n_total);
    if alpha == 0.0 {
        return Ok(plan);
    }
    let total = sums.total_weight;
    let target = alpha * total - COVERAGE_EPS * total;
    let exhaustive = alpha >= 1.0;

    let mut tracker = CoverTracker::new(block);
    let (mut next_s, mut next_v) = (0usize, 0usize);
    let (mut ol_s, mut ol_v, mut sum) = (0.0f64, 0.0f64, 0.0f64);
    let mut stalled = false;

    loop {
        if exhaustive {
            if tracker.uncovered_nonzero == 0 {
                break;
            }
        } else if sum >= target || (stalled && tracker.mass >= target) {
            break;
        }
        let s = sums.slashes.get(next_s);
        let v = sums.verticals.get(next_v);
        let take_slash = match (s, v) {
            (None, None) => break,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(s), Some(v)) => {
                let gain_s = s.weight - ol_v;
                let gain_v = v.weight - ol_s;
                let den_s = s.length.saturating_sub(plan.verticals.len()).max(1) as f64;
                let den_v = v.length.saturating_sub(plan.slashes.len()).max(1) as f64;
                gain_s / den_s >= gain_v / den_v
            }
        };
        let before = sum;
        let line = if take_slash {
            let s = &sums.slashes[next_s];
            next_s += 1;
            if let LineKind::Slash(d) = s.kind {
                plan.slashes.insert(d);
            }
            ol_s += s.max_cell;
            sum += s.weight - ol_v;
            s.kind
        } else {
            let v = &sums.verticals[next_v];
            next_v += 1;
            if let LineKind::Vertical(c) = v.kind {
                plan.verticals.insert(c);
            }
            ol_v += v.max_cell;
            sum += v.weight - ol_s;
            v.kind
        };
        tracker.add(line);
        if sum <= before {
            stalled = true;
        }
    }
    plan.approx_sum = sum;
    plan.coverage = coverage_ratio_rows(block, &plan);
    Ok(plan)
}

/// Sorted sample of query rows: `min(n_new, max(floor, ceil(rate * n_new)))`
/// distinct rows drawn uniformly, always including the last row.
pub fn sample_rows(n_new: usize, rate: f64, floor: usize, seed: u64) -> Result<Vec<usize>> {
    if n_new == 0 {
        return Err(SparsifyError::EmptyBlock);
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(SparsifyError::InvalidSampling(format!("rate {rate} outside (0, 1]")));
    }
    if floor == 0 {
        return Err(SparsifyError::InvalidSampling("floor must be at least 1".into()));
    }
    let want = ((rate * n_new as f64).ceil() as usize).max(floor).min(n_new);
    if want == n_new {
        return Ok((0..n_new).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<usize> = rand::seq::index::sample(&mut rng, n_new - 1, want - 1).into_vec();
    rows.push(n_new - 1);
    rows.sort_unstable();
    Ok(rows)
}

/// Result of sparsifying one head.
#[derive(Debug, Clone)]
pub struct HeadSparsification {
    pub plan: HeadPlan,
    /// Query·key scores computed to build the sampled block.
    pub score_ops: u64,
}

/// Builds the sampled attention rows `softmax(Q_s K^T / sqrt(d_k))` for the
/// sampled query rows (global positions `positions`), summarises their lines
/// and runs the greedy selector. `n_new` is the row count of the full block.
pub fn sparsify_head(
    q_sampled: &Matrix,
    k_all: &Matrix,
    positions: &[usize],
    n_new: usize,
    alpha: f64,
) -> Result<HeadSparsification> {
    check_alpha(alpha)?;
    if positions.is_empty() || n_new == 0 {
        return Err(SparsifyError::EmptyBlock);
    }
    let n_total = k_all.rows();
    if n_new > n_total {
        return Err(TensorError::DimensionMismatch(format!(
            "{n_new} new rows exceed {n_total} keys"
        ))
        .into());
    }
    let row_offset = n_total - n_new;
    if positions.iter().any(|&g| g < row_offset || g >= n_total)
        || positions.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(SparsifyError::InvalidSampling(
            "sampled positions must be ascending and inside the block".into(),
        ));
    }
    let (weights, score_ops) = tensor::causal_attention_rows(q_sampled, k_all, positions)?;
    let block = BlockRows { weights, positions: positions.to_vec(), n_total, row_offset };
    let sums = line_sums_rows(&block);
    let plan = greedy_select_lines(&block, &sums, alpha)?;
    Ok(HeadSparsification { plan, score_ops })
}

/// Minimum-cost plan found by exact search.
#[derive(Debug, Clone, PartialEq)]
pub struct MinLines {
    pub cost: usize,
    pub plan: HeadPlan,
}

/// Exact minimum of summed line lengths subject to covering `alpha` of the
/// mass. Enumerates every vertical subset; for a fixed vertical set the slash
/// choice is a 0/1 knapsack over integer lengths, solved exactly by dynamic
/// programming on the residual slash masses.
pub fn brute_force_min_lines(block: &AttentionBlock, alpha: f64) -> Result<MinLines> {
    check_alpha(alpha)?;
    let n = block.n_total;
    if n > BRUTE_FORCE_MAX_KEYS {
        return Err(SparsifyError::InstanceTooLarge { n_total: n, max: BRUTE_FORCE_MAX_KEYS });
    }
    let m = block.n_new;
    let mut best = MinLines { cost: 0, plan: HeadPlan::empty(m, n) };
    if alpha == 0.0 {
        return Ok(best);
    }
    let rows = BlockRows::from_block(block);
    let total = block.total_weight();
    let target = alpha * total - COVERAGE_EPS * total;
    let exhaustive = alpha >= 1.0;
    let off = block.row_offset;
    let w = |g: usize, c: usize| block.weights.get(g - off, c);

    let col_mass: Vec<f64> = (0..n).map(|c| (off.max(c)..n).map(|g| w(g, c)).sum()).collect();
    let v_len: Vec<usize> = (0..n).map(|c| vertical_len(m, n, c)).collect();
    let s_len: Vec<usize> = (0..n).map(|d| slash_len(m, n, d)).collect();
    let max_cost: usize = s_len.iter().sum();

    let mut best_cost = usize::MAX;
    let mut best_sets = (0u32, 0u32);
    let mut residual = vec![0.0f64; n];
    let mut dp_val = vec![f64::NEG_INFINITY; max_cost + 1];
    let mut dp_set = vec![0u32; max_cost + 1];

    for vmask in 0u32..(1u32 << n) {
        let cols: Vec<usize> = (0..n).filter(|&c| vmask >> c & 1 == 1).collect();
        if cols.iter().any(|&c| col_mass[c] <= 0.0) {
            continue;
        }
        let v_cost: usize = cols.iter().map(|&c| v_len[c]).sum();
        if v_cost > best_cost {
            continue;
        }
        let v_mass: f64 = cols.iter().map(|&c| col_mass[c]).sum();

        if exhaustive {
            let mut smask = 0u32;
            let mut cost = v_cost;
            for d in 0..n {
                let needs = (off.max(d)..n).any(|g| vmask >> (g - d) & 1 == 0 && w(g, g - d) > 0.0);
                if needs {
                    smask |= 1 << d;
                    cost += s_len[d];
                }
            }
            if cost < best_cost {
                best_cost = cost;
                best_sets = (smask, vmask);
            }
            continue;
        }

        // Slash masses net of the cells already held by the chosen columns.
        for (d, r) in residual.iter_mut().enumerate() {
            *r = (off.max(d)..n)
                .filter(|&g| vmask >> (g - d) & 1 == 0)
                .map(|g| w(g, g - d))
                .sum();
        }
        let budget = (best_cost.min(max_cost + v_cost) - v_cost).min(max_cost);
        dp_val[..=budget].fill(f64::NEG_INFINITY);
        dp_val[0] = 0.0;
        dp_set[..=budget].fill(0);
        for d in 0..n {
            if residual[d] <= 0.0 {
                continue;
            }
            let l = s_len[d];
            for c in (l..=budget).rev() {
                let cand = dp_val[c - l] + residual[d];
                if dp_val[c - l] > f64::NEG_INFINITY && cand > dp_val[c] {
                    dp_val[c] = cand;
                    dp_set[c] = dp_set[c - l] | (1 << d);
                }
            }
        }
        for c in 0..=budget {
            if dp_val[c] > f64::NEG_INFINITY && v_mass + dp_val[c] >= target {
                let cost = v_cost + c;
                if cost < best_cost {
                    best_cost = cost;
                    best_sets = (dp_set[c], vmask);
                }
                break;
            }
        }
    }

    if best_cost == usize::MAX {
        // Unreachable for a valid block: the full plan covers everything.
        best.plan = HeadPlan::full(m, n);
        best.cost = best.plan.cost();
        return Ok(best);
    }
    let (smask, vmask) = best_sets;
    best.plan.slashes = (0..n).filter(|&d| smask >> d & 1 == 1).collect();
    best.plan.verticals = (0..n).filter(|&c| vmask >> c & 1 == 1).collect();
    best.plan.coverage = coverage_ratio_rows(&rows, &best.plan);
    best.cost = best.plan.cost();
    debug_assert_eq!(best.cost, best_cost);
    Ok(best)
}
