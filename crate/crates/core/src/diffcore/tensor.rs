//! Dense row-major matrices of `f64`.

use serde::{Deserialize, Serialize};

/// A dense row-major matrix. Column vectors are `n x 1`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(1, 1, value)
    }

    /// Builds a matrix from row-major data.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single entry of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        // Branch-free per chunk so the check vectorizes.
        self.data
            .chunks(16)
            .all(|c| c.iter().fold(true, |ok, v| ok & v.is_finite()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in zip_map");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
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

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (k, m) = (self.cols as isize, other.cols as isize);
        gemm(self.rows, self.cols, other.cols, &self.data, (k, 1), &other.data, (m, 1))
    }

    /// `self^T * other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Self) -> Self {
        assert_eq!(
            self.rows, other.rows,
            "t_matmul shape mismatch {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (k, m) = (self.cols as isize, other.cols as isize);
        gemm(self.cols, self.rows, other.cols, &self.data, (1, k), &other.data, (m, 1))
    }

    /// `self * other^T` without materialising the transpose.
    pub fn matmul_t(&self, other: &Self) -> Self {
        assert_eq!(
            self.cols, other.cols,
            "matmul_t shape mismatch {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let k = self.cols as isize;
        gemm(self.rows, self.cols, other.rows, &self.data, (k, 1), &other.data, (1, k))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum over rows, giving a `1 x cols` tensor.
    pub fn col_sums(&self) -> Self {
        let mut out = vec![0.0; self.cols];
        if self.cols > 0 {
            for row in self.data.chunks_exact(self.cols) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        Self::from_vec(1, self.cols, out)
    }

    /// Sum over columns, giving an `rows x 1` tensor.
    pub fn row_sums(&self) -> Self {
        let data = (0..self.rows).map(|r| self.row(r).iter().sum()).collect();
        Self::from_vec(self.rows, 1, data)
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        out
    }

    /// Select rows by index.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec(idx.len(), self.cols, data)
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `(n x k) * (k x m)` product of strided operands; strides are
/// `(row, col)` in elements.
fn gemm(
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    a_stride: (isize, isize),
    b: &[f64],
    b_stride: (isize, isize),
) -> Tensor {
    if k == 0 {
        return Tensor::zeros(n, m);
    }
    let mut out: Vec<f64> = Vec::with_capacity(n * m);
    if n > 0 && m > 0 {
        // SAFETY: `a` holds an n x k matrix and `b` a k x m matrix under the
        // given strides (checked by the callers' shape assertions), and `out`
        // has room for a dense row-major n x m result. With beta = 0 the
        // output is written without being read, so every entry is
        // initialized before `set_len`.
        unsafe {
            matrixmultiply::dgemm(
                n,
                k,
                m,
                1.0,
                a.as_ptr(),
                a_stride.0,
                a_stride.1,
                b.as_ptr(),
                b_stride.0,
                b_stride.1,
                0.0,
                out.as_mut_ptr(),
                m as isize,
                1,
            );
            out.set_len(n * m);
        }
    }
    Tensor::from_vec(n, m, out)
}

/// `log(sum(exp(values)))` with max subtraction. Empty input gives `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
