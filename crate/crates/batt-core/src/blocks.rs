//! Block partitioning and per-block summary statistics.
//!
//! A grid chops `0..seq_len` into contiguous blocks of `block_size` tokens,
//! with a shorter final block when the length does not divide evenly. For
//! each block we keep the summaries the selection and diagnostic stages
//! need: the mean token, per-feature variances, the radius (largest
//! distance from any member to the mean), the largest member norm, and
//! optionally the full covariance matrix.
//!
//! All moments are population moments, dividing by the member count n
//! rather than n - 1, which keeps the cross-moment identity
//! `mean((dq_i . dk_j)^2) = tr(Cov_Q Cov_K)` exact.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{l2_norm, TokenMatrix};

/// Contiguous partition of a token range into fixed-size blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockGrid {
    seq_len: usize,
    block_size: usize,
    n_blocks: usize,
}

/// Splits `0..seq_len` into `ceil(seq_len / block_size)` contiguous blocks.
pub fn make_grid(seq_len: usize, block_size: usize) -> Result<BlockGrid> {
    if seq_len == 0 {
        return Err(Error::ZeroDim("seq_len"));
    }
    if block_size == 0 {
        return Err(Error::ZeroDim("block_size"));
    }
    Ok(BlockGrid {
        seq_len,
        block_size,
        n_blocks: seq_len.div_ceil(block_size),
    })
}

impl BlockGrid {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    /// Token range covered by block `g`.
    pub fn range(&self, g: usize) -> Range<usize> {
        let start = g * self.block_size;
        start..self.seq_len.min(start + self.block_size)
    }

    /// Number of tokens in block `g`.
    pub fn len_of(&self, g: usize) -> usize {
        self.range(g).len()
    }

    pub fn iter(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.n_blocks).map(|g| self.range(g))
    }

    /// Errors unless the grid covers exactly the rows of `m`.
    pub fn check_matches(&self, m: &TokenMatrix) -> Result<()> {
        if m.rows() != self.seq_len {
            return Err(Error::DimMismatch {
                context: "block grid",
                unit: "rows",
                expected: self.seq_len,
                got: m.rows(),
            });
        }
        Ok(())
    }
}

/// Summary statistics of one block of tokens.
#[derive(Debug, Clone)]
pub struct BlockStats {
    /// Number of member tokens.
    pub count: usize,
    /// Per-feature mean.
    pub mean: Vec<f64>,
    /// Per-feature population variance.
    pub var_diag: Vec<f64>,
    /// Largest Euclidean distance from a member to the mean.
    pub radius: f64,
    /// Largest member Euclidean norm.
    pub max_norm: f64,
    /// Full population covariance, row-major d x d, when requested.
    pub cov_full: Option<Vec<f64>>,
}

impl BlockStats {
    /// The covariance matrix, failing if it was not computed.
    pub fn cov_full(&self) -> Result<&[f64]> {
        self.cov_full.as_deref().ok_or(Error::MissingCovariance)
    }
}

/// Mean token of every block.
pub fn block_means(x: &TokenMatrix, grid: &BlockGrid) -> Result<Vec<Vec<f64>>> {
    grid.check_matches(x)?;
    let d = x.cols();
    let mut out = Vec::with_capacity(grid.n_blocks());
    for range in grid.iter() {
        let mut mean = vec![0.0; d];
        for i in range.clone() {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        let n = range.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        out.push(mean);
    }
    Ok(out)
}

/// Full summary statistics of every block.
pub fn block_statistics(
    x: &TokenMatrix,
    grid: &BlockGrid,
    full_cov: bool,
) -> Result<Vec<BlockStats>> {
    grid.check_matches(x)?;
    let d = x.cols();
    let means = block_means(x, grid)?;
    let mut out = Vec::with_capacity(grid.n_blocks());
    for (range, mean) in grid.iter().zip(means) {
        let n = range.len() as f64;
        let mut var_diag = vec![0.0; d];
        let mut cov = full_cov.then(|| vec![0.0; d * d]);
        let mut radius: f64 = 0.0;
        let mut max_norm: f64 = 0.0;
        let mut dev = vec![0.0; d];
        for i in range.clone() {
            let row = x.row(i);
            for (t, (dv, m)) in dev.iter_mut().zip(&mean).enumerate() {
                *dv = row[t] - m;
            }
            for (vd, dv) in var_diag.iter_mut().zip(&dev) {
                *vd += dv * dv;
            }
            if let Some(c) = cov.as_deref_mut() {
                for t in 0..d {
                    for s in t..d {
                        c[t * d + s] += dev[t] * dev[s];
                    }
                }
            }
            radius = radius.max(l2_norm(&dev));
            max_norm = max_norm.max(l2_norm(row));
        }
        for vd in &mut var_diag {
            *vd /= n;
        }
        if let Some(c) = cov.as_deref_mut() {
            for t in 0..d {
                for s in t..d {
                    c[t * d + s] /= n;
                    c[s * d + t] = c[t * d + s];
                }
            }
        }
        out.push(BlockStats {
            count: range.len(),
            mean,
            var_diag,
            radius,
            max_norm,
            cov_full: cov,
        });
    }
    Ok(out)
}

/// `tr(A B)` for symmetric row-major `d x d` matrices.
pub fn trace_product(a: &[f64], b: &[f64], d: usize) -> Result<f64> {
    if a.len() != d * d || b.len() != d * d {
        return Err(Error::DimMismatch {
            context: "trace product",
            unit: "values",
            expected: d * d,
            got: if a.len() != d * d { a.len() } else { b.len() },
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}
