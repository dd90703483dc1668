//! Exact dense attention, used as the ground-truth oracle.
//!
//! Everything here is quadratic in sequence length on purpose: the point is
//! a trustworthy reference, not speed. [`dense_attention_capped`] refuses
//! sequences past a caller-chosen cap so a mistyped CLI flag cannot melt a
//! laptop materializing an N x N map.

use crate::blocks::BlockGrid;
use crate::error::{Error, Result};
use crate::tensor::{row_softmax, TokenMatrix};

/// Scaled query-key logits: `L[i][j] = (Q_i . K_j) / sqrt(d)`.
pub fn token_logits(q: &TokenMatrix, k: &TokenMatrix) -> Result<TokenMatrix> {
    if q.cols() != k.cols() {
        return Err(Error::DimMismatch {
            context: "token logits",
            unit: "feature columns",
            expected: q.cols(),
            got: k.cols(),
        });
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut data = Vec::with_capacity(q.rows() * k.rows());
    for qi in q.iter_rows() {
        for kj in k.iter_rows() {
            let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
            data.push(dot * scale);
        }
    }
    TokenMatrix::new(q.rows(), k.rows(), data)
}

/// Output of the dense oracle: the attention output and the full map.
#[derive(Debug, Clone)]
pub struct DenseResult {
    /// `N_q x d_v` attention output.
    pub output: TokenMatrix,
    /// `N_q x N_k` row-stochastic attention map.
    pub map: TokenMatrix,
}

/// Exact softmax attention with the full `N_q x N_k` map materialized.
pub fn dense_attention(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Result<DenseResult> {
    if k.rows() != v.rows() {
        return Err(Error::DimMismatch {
            context: "dense attention",
            unit: "value rows",
            expected: k.rows(),
            got: v.rows(),
        });
    }
    let logits = token_logits(q, k)?;
    let map = row_softmax(&logits)?;
    let mut out = Vec::with_capacity(q.rows() * v.cols());
    for wrow in map.iter_rows() {
        for t in 0..v.cols() {
            let mut acc = 0.0;
            for (w, vrow) in wrow.iter().zip(v.iter_rows()) {
                acc += w * vrow[t];
            }
            out.push(acc);
        }
    }
    Ok(DenseResult {
        output: TokenMatrix::new(q.rows(), v.cols(), out)?,
        map,
    })
}

/// [`dense_attention`] behind a sequence-length cap.
pub fn dense_attention_capped(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    cap: usize,
) -> Result<DenseResult> {
    let len = q.rows().max(k.rows());
    if len > cap {
        return Err(Error::DenseCapExceeded { len, cap });
    }
    dense_attention(q, k, v)
}

/// Ground-truth block mass: the dense map pooled over block pairs.
///
/// Entry `(gq, gk)` is the average over queries in block `gq` of the total
/// attention they place on keys in block `gk`. Rows sum to 1 because the
/// dense map is row-stochastic.
pub fn oracle_block_mass(
    map: &TokenMatrix,
    grid_q: &BlockGrid,
    grid_k: &BlockGrid,
) -> Result<TokenMatrix> {
    if map.rows() != grid_q.seq_len() {
        return Err(Error::DimMismatch {
            context: "oracle block mass",
            unit: "map rows",
            expected: grid_q.seq_len(),
            got: map.rows(),
        });
    }
    if map.cols() != grid_k.seq_len() {
        return Err(Error::DimMismatch {
            context: "oracle block mass",
            unit: "map columns",
            expected: grid_k.seq_len(),
            got: map.cols(),
        });
    }
    let mut data = Vec::with_capacity(grid_q.n_blocks() * grid_k.n_blocks());
    for rq in grid_q.iter() {
        for rk in grid_k.iter() {
            let mut mass = 0.0;
            for i in rq.clone() {
                let row = map.row(i);
                for j in rk.clone() {
                    mass += row[j];
                }
            }
            data.push(mass / rq.len() as f64);
        }
    }
    TokenMatrix::new(grid_q.n_blocks(), grid_k.n_blocks(), data)
}
