//! Dense row-major matrices and the attention kernels shared by every phase.
//!
//! Dense, masked-sparse and compressed attention all go through one gather
//! kernel ([`attend_gathered`]): for each query row it receives the ascending
//! list of key indices to score, so a sparse pattern that happens to contain
//! every causal cell reproduces the dense result bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparsify::HeadPlan;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite input at ({row}, {col})")]
    NonFiniteInput { row: usize, col: usize },
    #[error("row {0} is fully masked")]
    AllMaskedRow(usize),
    #[error("sparse plan selects no lines")]
    EmptyPlan,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |r| self.row(r))
    }

    /// Appends one row. A 0x0 matrix adopts the row's width.
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(TensorError::DimensionMismatch(format!(
                "pushing {} values onto a matrix with {} columns",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn append_rows(&mut self, other: &Matrix) -> Result<()> {
        for r in other.iter_rows() {
            self.push_row(r)?;
        }
        Ok(())
    }

    pub fn truncate_rows(&mut self, rows: usize) {
        if rows < self.rows {
            self.rows = rows;
            self.data.truncate(rows * self.cols);
        }
    }

    /// Copies the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// `self · rhs`. Each output cell accumulates in ascending inner index,
    /// so row `i` of the product does not depend on any other row of `self`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(TensorError::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TensorError::DimensionMismatch(format!(
                "add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dot product accumulated in ascending index order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable softmax of one row, in place. `-inf` entries become 0.
fn softmax_in_place(row: &mut [f64], row_idx: usize) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for (c, &v) in row.iter().enumerate() {
        if v.is_nan() || v == f64::INFINITY {
            return Err(TensorError::NonFiniteInput { row: row_idx, col: c });
        }
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(TensorError::AllMaskedRow(row_idx));
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Row-wise softmax. `-inf` marks a masked cell; NaN and `+inf` are rejected.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut out = logits.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r), r)?;
    }
    Ok(out)
}

/// A rectangular slice of an attention matrix: `n_new` query rows against
/// `n_total` keys, where query row `r` sits at global position
/// `row_offset + r` and may only see keys `0..=row_offset + r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub n_new: usize,
    pub n_total: usize,
    pub row_offset: usize,
    pub weights: Matrix,
}

impl AttentionBlock {
    pub fn new(weights: Matrix) -> Result<Self> {
        let n_new = weights.rows();
        let n_total = weights.cols();
        if n_new > n_total {
            return Err(TensorError::DimensionMismatch(format!(
                "{n_new} query rows exceed {n_total} keys"
            )));
        }
        Ok(Self { n_new, n_total, row_offset: n_total - n_new, weights })
    }

    /// Global position of query row `r`.
    pub fn global_row(&self, r: usize) -> usize {
        self.row_offset + r
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.data().iter().sum()
    }

    /// Checks row sums and causal zeros. Tolerance applies to row sums only.
    pub fn check_invariants(&self, tol: f64) -> std::result::Result<(), String> {
        for r in 0..self.n_new {
            let row = self.weights.row(r);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(format!("row {r} sums to {s}"));
            }
            for (c, &w) in row.iter().enumerate() {
                if c > self.global_row(r) && w != 0.0 {
                    return Err(format!("non-causal weight at ({r}, {c})"));
                }
                if w < 0.0 || !w.is_finite() {
                    return Err(format!("invalid weight {w} at ({r}, {c})"));
                }
            }
        }
        Ok(())
    }
}

/// Output of one attention evaluation plus the number of query·key scores
/// that were actually computed.
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: Matrix,
    pub score_ops: u64,
}

/// Core gather kernel. `cells[r]` lists the key indices row `r` attends to,
/// strictly ascending. Returns the outputs and, if requested, the dense
/// weight rows (zeros outside the gathered cells).
pub(crate) fn attend_gathered(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cells: &[Vec<usize>],
    want_weights: bool,
) -> Result<(Attended, Option<Matrix>)> {
    debug_assert_eq!(cells.len(), q.rows());
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut weights = want_weights.then(|| Matrix::zeros(q.rows(), k.rows()));
    let mut score_ops = 0u64;
    let mut logits = Vec::new();
    for (r, cols) in cells.iter().enumerate() {
        if cols.is_empty() {
            return Err(TensorError::AllMaskedRow(r));
        }
        logits.clear();
        let qr = q.row(r);
        for &c in cols {
            logits.push(dot(qr, k.row(c)) * scale);
        }
        score_ops += cols.len() as u64;
        softmax_in_place(&mut logits, r)?;
        let out_row = out.row_mut(r);
        for (&c, &a) in cols.iter().zip(&logits) {
            for (o, &x) in out_row.iter_mut().zip(v.row(c)) {
                *o += a * x;
            }
        }
        if let Some(w) = weights.as_mut() {
            for (&c, &a) in cols.iter().zip(&logits) {
                w.set(r, c, a);
            }
        }
    }
    Ok((Attended { output: out, score_ops }, weights))
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix, row_offset: usize) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(TensorError::DimensionMismatch(format!(
            "query width {} vs key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if v.rows() != k.rows() {
        return Err(TensorError::DimensionMismatch(format!(
            "{} values for {} keys",
            v.rows(),
            k.rows()
        )));
    }
    if q.rows() > k.rows() || row_offset != k.rows() - q.rows() {
        return Err(TensorError::DimensionMismatch(format!(
            "row offset {row_offset} with {} queries and {} keys",
            q.rows(),
            k.rows()
        )));
    }
    Ok(())
}

/// All causal cells of each query row.
pub(crate) fn causal_cells(n_new: usize, row_offset: usize) -> Vec<Vec<usize>> {
    (0..n_new).map(|r| (0..=row_offset + r).collect()).collect()
}

/// Causal scaled dot-product attention. Returns `Z = A·V` and the weights `A`.
pub fn scaled_dot_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    row_offset: usize,
) -> Result<(Matrix, AttentionBlock)> {
    check_qkv(q, k, v, row_offset)?;
    let cells = causal_cells(q.rows(), row_offset);
    let (att, weights) = attend_gathered(q, k, v, &cells, true)?;
    let block = AttentionBlock::new(weights.expect("weights requested"))?;
    Ok((att.output, block))
}

/// Like [`scaled_dot_attention`] but without materialising the weights.
pub fn dense_attention(q: &Matrix, k: &Matrix, v: &Matrix, row_offset: usize) -> Result<Attended> {
    check_qkv(q, k, v, row_offset)?;
    let cells = causal_cells(q.rows(), row_offset);
    Ok(attend_gathered(q, k, v, &cells, false)?.0)
}

/// Attention restricted to the cells on the plan's slash and vertical lines.
/// A row the plan leaves empty attends to its own diagonal cell only.
pub fn masked_sparse_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    plan: &HeadPlan,
    row_offset: usize,
) -> Result<Attended> {
    check_qkv(q, k, v, row_offset)?;
    if plan.is_empty() {
        return Err(TensorError::EmptyPlan);
    }
    if plan.n_total != k.rows() || plan.n_new != q.rows() {
        return Err(TensorError::DimensionMismatch(format!(
            "plan for {}x{} applied to {}x{}",
            plan.n_new,
            plan.n_total,
            q.rows(),
            k.rows()
        )));
    }
    let cells = plan.row_cells();
    Ok(attend_gathered(q, k, v, &cells, false)?.0)
}

/// Causal attention weights for query rows at the given global positions
/// against all keys. Row `i` is zero beyond column `positions[i]`. Returns the
/// weights and the number of scores computed.
pub fn causal_attention_rows(q: &Matrix, k: &Matrix, positions: &[usize]) -> Result<(Matrix, u64)> {
    if q.cols() != k.cols() || q.rows() != positions.len() {
        return Err(TensorError::DimensionMismatch(format!(
            "{}x{} queries at {} positions against {}x{} keys",
            q.rows(),
            q.cols(),
            positions.len(),
            k.rows(),
            k.cols()
        )));
    }
    if let Some(&g) = positions.iter().find(|&&g| g >= k.rows()) {
        return Err(TensorError::DimensionMismatch(format!(
            "position {g} beyond {} keys",
            k.rows()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), k.rows());
    let mut ops = 0u64;
    for (i, &g) in positions.iter().enumerate() {
        let qr = q.row(i);
        let row = &mut out.row_mut(i)[..=g];
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = dot(qr, k.row(c)) * scale;
        }
        ops += (g + 1) as u64;
        softmax_in_place(row, i)?;
    }
    Ok((out, ops))
}

/// Reference path: dense softmax over `logits - c(1 - M)` with the causal mask
/// applied as `-inf`. Only used to check the gather form.
pub fn additive_mask_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &[Vec<bool>],
    row_offset: usize,
    c: f64,
) -> Result<Matrix> {
    check_qkv(q, k, v, row_offset)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut logits = Matrix::zeros(q.rows(), k.rows());
    for r in 0..q.rows() {
        for col in 0..k.rows() {
            let value = if col > row_offset + r {
                f64::NEG_INFINITY
            } else {
                let penalty = if mask[r][col] { 0.0 } else { c };
                dot(q.row(r), k.row(col)) * scale - penalty
            };
            logits.set(r, col, value);
        }
    }
    softmax_rows(&logits)?.matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform_row() {
        let m = Matrix::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        for &v in s.row(0) {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_masked_cell_is_zero() {
        let m = Matrix::from_rows(&[[3.7, f64::NEG_INFINITY]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_log_weights() {
        let m = Matrix::from_rows(&[[1f64.ln(), 3f64.ln()]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!(close(s.get(0, 0), 0.25, 1e-15));
        assert!(close(s.get(0, 1), 0.75, 1e-15));
    }

    #[test]
    fn softmax_rejects_bad_rows() {
        let all_masked = Matrix::from_rows(&[[f64::NEG_INFINITY, f64::NEG_INFINITY]]).unwrap();
        assert_eq!(softmax_rows(&all_masked), Err(TensorError::AllMaskedRow(0)));
        let nan = Matrix::from_rows(&[[0.0, f64::NAN]]).unwrap();
        assert_eq!(
            softmax_rows(&nan),
            Err(TensorError::NonFiniteInput { row: 0, col: 1 })
        );
        let inf = Matrix::from_rows(&[[f64::INFINITY]]).unwrap();
        assert!(matches!(softmax_rows(&inf), Err(TensorError::NonFiniteInput { .. })));
    }

    #[test]
    fn single_token_attention() {
        let q = Matrix::from_rows(&[[0.3, -0.2]]).unwrap();
        let k = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let v = Matrix::from_rows(&[[5.0, 6.0, 7.0]]).unwrap();
        let (z, a) = scaled_dot_attention(&q, &k, &v, 0).unwrap();
        assert_eq!(a.weights.row(0), &[1.0]);
        assert_eq!(z, v);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let q = Matrix::from_rows(&[[0.9, 0.1]]).unwrap();
        let k = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let v = Matrix::from_rows(&[[1.0], [3.0]]).unwrap();
        let (z, a) = scaled_dot_attention(&q, &k, &v, 1).unwrap();
        assert_eq!(a.weights.row(0), &[0.5, 0.5]);
        assert!(close(z.get(0, 0), 2.0, 1e-15));
    }

    #[test]
    fn two_by_two_hand_softmax() {
        let q = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        let k = Matrix::from_rows(&[[0.0], [4f64.ln()]]).unwrap();
        let v = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let (_, a) = scaled_dot_attention(&q, &k, &v, 0).unwrap();
        assert_eq!(a.weights.row(0), &[1.0, 0.0]);
        assert!(close(a.weights.get(1, 0), 0.2, 1e-9));
        assert!(close(a.weights.get(1, 1), 0.8, 1e-9));
    }

    #[test]
    fn dimension_errors() {
        let q = Matrix::zeros(1, 2);
        let k = Matrix::zeros(2, 3);
        let v = Matrix::zeros(2, 1);
        assert!(matches!(
            scaled_dot_attention(&q, &k, &v, 1),
            Err(TensorError::DimensionMismatch(_))
        ));
        let k = Matrix::zeros(2, 2);
        assert!(matches!(
            scaled_dot_attention(&q, &k, &v, 0),
            Err(TensorError::DimensionMismatch(_))
        ));
        let v3 = Matrix::zeros(3, 1);
        assert!(matches!(
            scaled_dot_attention(&q, &k, &v3, 1),
            Err(TensorError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Matrix::from_rows(&[[1.5, -2.0, 0.25], [0.0, 3.0, -1.0]]).unwrap();
        let b = Matrix::from_rows(&[[2.0, 1.0], [0.5, -0.5], [4.0, 8.0]]).unwrap();
        let p = a.matmul(&b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert_eq!(p.get(i, j), s);
            }
        }
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn push_and_truncate() {
        let mut m = Matrix::zeros(0, 0);
        m.push_row(&[1.0, 2.0]).unwrap();
        m.push_row(&[3.0, 4.0]).unwrap();
        assert!(m.push_row(&[1.0]).is_err());
        assert_eq!(m.rows(), 2);
        m.truncate_rows(1);
        assert_eq!(m.data(), &[1.0, 2.0]);
        assert_eq!(m.select_rows(&[0, 0]).data(), &[1.0, 2.0, 1.0, 2.0]);
    }
}
