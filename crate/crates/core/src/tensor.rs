//! Dense row-major `f64` matrices and the deterministic row-parallel kernels
//! behind every forward and backward pass.
//!
//! Every dot product is accumulated left to right, starting from `0.0`, in
//! index order. Parallel kernels only split the *output rows* into
//! contiguous blocks, so the per-entry summation order never depends on the
//! thread count and results are bitwise identical for any `max_threads`.

use std::num::NonZeroUsize;
use std::ops::Range;
use std::thread;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("buffer of length {len} cannot hold a {rows}x{cols} matrix")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at flat index {index}")]
    NonFinite { index: usize },
    #[error("empty or inverted range [{lo}, {hi})")]
    BadRange { lo: f64, hi: f64 },
    #[error("standard deviation {0} is negative")]
    NegativeStddev(f64),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps a row-major buffer. Rejects wrong lengths and non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(TensorError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    /// Copy of the rows in `range`.
    pub fn slice_rows(&self, range: Range<usize>) -> Matrix {
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Infinity norm (max absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bitwise_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// How row-parallel kernels split their output.
///
/// Output rows are cut into at most `max_threads` contiguous blocks of at
/// least `min_rows_per_block` rows each; each block runs on its own scoped
/// thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParallelPolicy {
    pub max_threads: NonZeroUsize,
    pub min_rows_per_block: usize,
}

impl Default for ParallelPolicy {
    fn default() -> Self {
        Self::serial()
    }
}

impl ParallelPolicy {
    pub fn serial() -> Self {
        Self::with_threads(1)
    }

    /// `threads == 0` is treated as 1.
    pub fn with_threads(threads: usize) -> Self {
        Self {
            max_threads: NonZeroUsize::new(threads).unwrap_or(NonZeroUsize::MIN),
            min_rows_per_block: 1,
        }
    }

    pub fn threads(&self) -> usize {
        self.max_threads.get()
    }

    /// Contiguous row ranges covering `0..rows`, one per worker.
    pub fn partition(&self, rows: usize) -> Vec<Range<usize>> {
        if rows == 0 {
            return Vec::new();
        }
        let min_block = self.min_rows_per_block.max(1);
        let workers = self.threads().min(rows.div_ceil(min_block)).max(1);
        let block = rows.div_ceil(workers);
        (0..rows)
            .step_by(block)
            .map(|start| start..(start + block).min(rows))
            .collect()
    }

    /// Runs `f(first_row, rows_chunk)` over disjoint blocks of `out`, where
    /// `out` holds `out.len() / row_len` rows.
    pub fn for_each_row_block<F>(&self, out: &mut [f64], row_len: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync,
    {
        if row_len == 0 || out.is_empty() {
            return;
        }
        let blocks = self.partition(out.len() / row_len);
        if blocks.len() <= 1 {
            f(0, out);
            return;
        }
        let block_rows = blocks[0].len();
        thread::scope(|s| {
            for (b, chunk) in out.chunks_mut(block_rows * row_len).enumerate() {
                let f = &f;
                s.spawn(move || f(b * block_rows, chunk));
            }
        });
    }

    /// Maps `f` over the partition of `0..n` and returns results in block
    /// order.
    pub fn map_blocks<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(Range<usize>) -> T + Sync,
    {
        let blocks = self.partition(n);
        if blocks.len() <= 1 {
            return blocks.into_iter().map(&f).collect();
        }
        thread::scope(|s| {
            let handles: Vec<_> = blocks
                .into_iter()
                .map(|r| {
                    let f = &f;
                    s.spawn(move || f(r))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    }
}

/// Left-to-right dot product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Columns per tile in the matmul kernel.
const COL_TILE: usize = 256;
/// Output rows processed together so each loaded row of `b` is reused.
const ROW_GROUP: usize = 4;

/// `c = a * b`. Parallel over blocks of output rows.
pub fn matmul(a: &Matrix, b: &Matrix, policy: &ParallelPolicy) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, n) = (a.rows, b.cols);
    let mut c = Matrix::zeros(m, n);
    policy.for_each_row_block(&mut c.data, n, |first_row, chunk| {
        matmul_rows(a, b, first_row, chunk)
    });
    Ok(c)
}

// Loop order i-k-j over column tiles: each c[i][j] still sees its k terms
// in ascending order, starting from 0.0, exactly like `dot`.
fn matmul_rows(a: &Matrix, b: &Matrix, first_row: usize, out: &mut [f64]) {
    let n = b.cols;
    let k_dim = a.cols;
    let rows = out.len() / n;
    for group_start in (0..rows).step_by(ROW_GROUP) {
        let group_end = (group_start + ROW_GROUP).min(rows);
        for j0 in (0..n).step_by(COL_TILE) {
            let j1 = (j0 + COL_TILE).min(n);
            for k in 0..k_dim {
                let b_row = &b.data[k * n + j0..k * n + j1];
                for r in group_start..group_end {
                    let aik = a.data[(first_row + r) * k_dim + k];
                    let c_row = &mut out[r * n + j0..r * n + j1];
                    for (c, &bkj) in c_row.iter_mut().zip(b_row) {
                        *c += aik * bkj;
                    }
                }
            }
        }
    }
}

/// `y = a * x`.
pub fn matvec(a: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if a.cols != x.len() {
        return Err(TensorError::ShapeMismatch {
            op: "matvec",
            left: a.shape(),
            right: (x.len(), 1),
        });
    }
    let mut y = vec![0.0; a.rows];
    matvec_into(a, x, &mut y);
    Ok(y)
}

/// Unchecked `out = a * x`. Four rows are accumulated side by side to hide
/// add latency; each row's sum is still strictly left to right.
pub(crate) fn matvec_into(a: &Matrix, x: &[f64], out: &mut [f64]) {
    let n = a.cols;
    let mut rows = out.chunks_exact_mut(4).enumerate();
    for (g, dst) in &mut rows {
        let base = g * 4 * n;
        let r0 = &a.data[base..base + n];
        let r1 = &a.data[base + n..base + 2 * n];
        let r2 = &a.data[base + 2 * n..base + 3 * n];
        let r3 = &a.data[base + 3 * n..base + 4 * n];
        let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..n {
            let xk = x[k];
            s0 += r0[k] * xk;
            s1 += r1[k] * xk;
            s2 += r2[k] * xk;
            s3 += r3[k] * xk;
        }
        dst.copy_from_slice(&[s0, s1, s2, s3]);
    }
    let done = a.rows - a.rows % 4;
    for (i, o) in out.iter_mut().enumerate().skip(done) {
        *o = dot(a.row(i), x);
    }
}

/// `y = aᵀ * x`, summing over rows of `a` in ascending order.
pub fn matvec_transposed(a: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if a.rows != x.len() {
        return Err(TensorError::ShapeMismatch {
            op: "matvec_transposed",
            left: a.shape(),
            right: (x.len(), 1),
        });
    }
    let mut y = vec![0.0; a.cols];
    matvec_transposed_into(a, x, &mut y);
    Ok(y)
}

pub(crate) fn matvec_transposed_into(a: &Matrix, x: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        for (o, &aij) in out.iter_mut().zip(a.row(i)) {
            *o += aij * xi;
        }
    }
}

/// `u ⊗ v`, shape `(u.len(), v.len())`.
pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(u.len(), v.len());
    for (i, &ui) in u.iter().enumerate() {
        for (dst, &vj) in m.row_mut(i).iter_mut().zip(v) {
            *dst = ui * vj;
        }
    }
    m
}

/// Returns `alpha * x + y`.
pub fn axpy(alpha: f64, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(TensorError::ShapeMismatch {
            op: "axpy",
            left: (x.len(), 1),
            right: (y.len(), 1),
        });
    }
    Ok(x.iter().zip(y).map(|(xi, yi)| alpha * xi + yi).collect())
}
