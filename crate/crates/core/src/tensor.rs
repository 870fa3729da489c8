//! Dense row-major `f64` matrices.
//!
//! Everything the engine touches is a matrix: vectors are `n x 1`, scalars
//! are `1 x 1`. Kernels here are plain loops ordered so the innermost loop
//! walks contiguous memory.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    /// Column vector `n x 1`.
    pub fn column(data: Vec<f64>) -> Self {
        let rows = data.len();
        Self { rows, cols: 1, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        // inf * 0 and NaN * 0 are NaN, finite * 0 is 0
        self.data.iter().fold(0.0, |acc, v| acc + v * 0.0) == 0.0
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Rows selected by `indices`, in that order.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), cols: self.cols, data }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum over rows, giving `1 x cols`.
    pub fn col_sums(&self) -> Self {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Self { rows: 1, cols: self.cols, data: out }
    }

    /// Sum over columns, giving `rows x 1`.
    pub fn row_sums(&self) -> Self {
        let data = (0..self.rows).map(|r| self.row(r).iter().sum()).collect();
        Self { rows: self.rows, cols: 1, data }
    }

    /// Spectral-norm upper bound via the Frobenius norm.
    pub fn frobenius(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// `op(a) * op(b)` where `op` optionally transposes.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (m, p) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (p2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(p, p2, "matmul inner dimension mismatch");
    match (ta, tb) {
        (false, true) if p <= 8 => return matmul(a, &b.transpose(), false, false),
        (true, true) => return matmul(&a.transpose(), b, false, true),
        _ => {}
    }
    let mut out = vec![0.0; m * n];
    match (ta, tb) {
        (false, false) if n == 1 => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = dot(&a.data[i * p..(i + 1) * p], &b.data);
            }
        }
        (false, false) => {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for k in 0..p {
                    let aik = a.data[i * p + k];
                    if aik != 0.0 {
                        axpy(orow, aik, &b.data[k * n..(k + 1) * n]);
                    }
                }
            }
        }
        (true, false) if n == 1 => {
            // a is p x m, b is a column
            for k in 0..p {
                let bk = b.data[k];
                if bk != 0.0 {
                    axpy(&mut out, bk, &a.data[k * m..(k + 1) * m]);
                }
            }
        }
        (true, false) => {
            for k in 0..p {
                let arow = &a.data[k * m..(k + 1) * m];
                let brow = &b.data[k * n..(k + 1) * n];
                for (i, &aki) in arow.iter().enumerate() {
                    if aki != 0.0 {
                        axpy(&mut out[i * n..(i + 1) * n], aki, brow);
                    }
                }
            }
        }
        (false, true) => {
            // b is n x p
            for i in 0..m {
                let arow = &a.data[i * p..(i + 1) * p];
                for j in 0..n {
                    out[i * n + j] = dot(arow, &b.data[j * p..(j + 1) * p]);
                }
            }
        }
        (true, true) => unreachable!(),
    }
    Tensor { rows: m, cols: n, data: out }
}
