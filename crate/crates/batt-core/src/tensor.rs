//! Dense row-major matrices over f64, plus the two primitives everything
//! else leans on: row-wise softmax and the Euclidean norm.
//!
//! Token matrices hold one token per row and one feature per column. All
//! arithmetic runs in f64; the on-disk format stores f32 and the conversion
//! lives in [`crate::io`]. Construction rejects NaN and infinity, so any
//! matrix you can get your hands on contains only finite entries.

use crate::error::{Error, Result};

/// Row-major matrix of finite f64 values, at least 1 x 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    /// Builds a matrix from row-major data, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::ZeroDim("rows"));
        }
        if cols == 0 {
            return Err(Error::ZeroDim("cols"));
        }
        let expected = rows.checked_mul(cols).ok_or(Error::DimOverflow {
            rows: rows as u64,
            cols: cols as u64,
        })?;
        if data.len() != expected {
            return Err(Error::DimMismatch {
                context: "matrix data",
                unit: "values",
                expected,
                got: data.len(),
            });
        }
        for (idx, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: idx / cols,
                    col: idx % cols,
                });
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix by evaluating `f(row, col)` at every position.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.saturating_mul(cols));
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows.saturating_mul(cols)])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Largest entry-wise absolute difference against a same-shape matrix.
    pub fn max_abs_diff(&self, other: &TokenMatrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch {
                context: "matrix comparison",
                unit: "values",
                expected: self.data.len(),
                got: other.data.len(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Euclidean norm of a vector.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Applies softmax independently to each row.
///
/// Each row has its maximum subtracted before exponentiation, so the sum of
/// exponentials stays in [1, cols] and the division is always safe. The
/// output rows sum to 1 and preserve the ordering of the input entries.
pub fn row_softmax(x: &TokenMatrix) -> Result<TokenMatrix> {
    let mut out = Vec::with_capacity(x.rows() * x.cols());
    for row in x.iter_rows() {
        softmax_into(row, &mut out)?;
    }
    TokenMatrix::new(x.rows(), x.cols(), out)
}

/// Softmax of one slice, appended to `out`.
pub(crate) fn softmax_into(row: &[f64], out: &mut Vec<f64>) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for (j, v) in row.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { row: 0, col: j });
        }
        max = max.max(*v);
    }
    let start = out.len();
    let mut sum = 0.0;
    for v in row {
        let e = (v - max).exp();
        sum += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= sum;
    }
    Ok(())
}
