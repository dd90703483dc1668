//! Block-sparse attention execution.
//!
//! Given inputs already in execution order and a block mask, each query
//! token attends only to keys inside its selected key blocks, with the
//! softmax renormalized over that support. The kernel streams over key
//! blocks with a running max, running normalizer, and running weighted
//! value sum, so no row of logits is ever materialized; results match a
//! materialized masked softmax to well under 1e-10.
//!
//! Query blocks are independent and run in parallel. Within a query block
//! the key blocks merge in ascending index order, which keeps outputs
//! byte-identical across thread counts.

use rayon::prelude::*;

use crate::blocks::BlockGrid;
use crate::error::{Error, Result};
use crate::select::{unapply_permutation, BlockMask, Permutation};
use crate::tensor::TokenMatrix;

/// Output of the sparse path, remapped to original token order.
#[derive(Debug, Clone)]
pub struct SparseAttentionResult {
    /// `L_q x d_v` attention output in original (pre-sort) row order.
    pub output: TokenMatrix,
    /// Number of evaluated (query block, key block) pairs.
    pub pairs_computed: usize,
    /// `pairs_computed / (N_q * N_k)` over block counts.
    pub density_achieved: f64,
}

/// Cost model for one mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopAccount {
    pub pairs_computed: usize,
    pub dense_pairs: usize,
    pub density_achieved: f64,
    /// Multiply-add count: `2 * b_q * b_k * d` per evaluated pair, with
    /// ragged final blocks contributing their actual sizes.
    pub approx_flops: u64,
}

/// Counts evaluated pairs and approximate FLOPs for a mask.
pub fn flop_account(
    mask: &BlockMask,
    grid_q: &BlockGrid,
    grid_k: &BlockGrid,
    d: usize,
) -> Result<FlopAccount> {
    check_mask_dims(mask, grid_q, grid_k)?;
    let mut pairs = 0usize;
    let mut flops = 0u64;
    for (gq, row) in mask.iter_rows().enumerate() {
        let bq = grid_q.len_of(gq) as u64;
        for (gk, selected) in row.iter().enumerate() {
            if *selected {
                pairs += 1;
                flops += 2 * bq * grid_k.len_of(gk) as u64 * d as u64;
            }
        }
    }
    let dense_pairs = grid_q.n_blocks() * grid_k.n_blocks();
    Ok(FlopAccount {
        pairs_computed: pairs,
        dense_pairs,
        density_achieved: pairs as f64 / dense_pairs as f64,
        approx_flops: flops,
    })
}

fn check_mask_dims(mask: &BlockMask, grid_q: &BlockGrid, grid_k: &BlockGrid) -> Result<()> {
    if mask.rows() != grid_q.n_blocks() {
        return Err(Error::DimMismatch {
            context: "block mask",
            unit: "rows",
            expected: grid_q.n_blocks(),
            got: mask.rows(),
        });
    }
    if mask.cols() != grid_k.n_blocks() {
        return Err(Error::DimMismatch {
            context: "block mask",
            unit: "columns",
            expected: grid_k.n_blocks(),
            got: mask.cols(),
        });
    }
    Ok(())
}

/// Runs masked attention over pre-permuted inputs.
///
/// `perm_q` is the query permutation that produced `qp`; the returned
/// output is already mapped back through its inverse. Keys and values must
/// share one ordering.
pub fn block_sparse_attention(
    qp: &TokenMatrix,
    kp: &TokenMatrix,
    vp: &TokenMatrix,
    grid_q: &BlockGrid,
    grid_k: &BlockGrid,
    mask: &BlockMask,
    perm_q: &Permutation,
) -> Result<SparseAttentionResult> {
    grid_q.check_matches(qp)?;
    grid_k.check_matches(kp)?;
    check_mask_dims(mask, grid_q, grid_k)?;
    if qp.cols() != kp.cols() {
        return Err(Error::DimMismatch {
            context: "sparse attention",
            unit: "feature columns",
            expected: qp.cols(),
            got: kp.cols(),
        });
    }
    if vp.rows() != kp.rows() {
        return Err(Error::DimMismatch {
            context: "sparse attention",
            unit: "value rows",
            expected: kp.rows(),
            got: vp.rows(),
        });
    }
    if perm_q.len() != qp.rows() {
        return Err(Error::DimMismatch {
            context: "sparse attention",
            unit: "permutation entries",
            expected: qp.rows(),
            got: perm_q.len(),
        });
    }
    for gq in 0..mask.rows() {
        if mask.row_count(gq) == 0 {
            return Err(Error::EmptyMaskRow(gq));
        }
    }

    let d = qp.cols();
    let dv = vp.cols();
    let scale = 1.0 / (d as f64).sqrt();

    let mut out = vec![0.0; qp.rows() * dv];
    let row_ranges: Vec<std::ops::Range<usize>> = grid_q.iter().collect();
    let chunks: Vec<(usize, &mut [f64])> = {
        let mut rest = out.as_mut_slice();
        let mut chunks = Vec::with_capacity(row_ranges.len());
        for (gq, range) in row_ranges.iter().enumerate() {
            let (head, tail) = rest.split_at_mut(range.len() * dv);
            chunks.push((gq, head));
            rest = tail;
        }
        chunks
    };

    chunks.into_par_iter().for_each(|(gq, out_block)| {
        let selected: Vec<usize> = (0..mask.cols()).filter(|&gk| mask.get(gq, gk)).collect();
        let mut logits = vec![0.0; grid_k.block_size().min(grid_k.seq_len())];
        for (local_i, i) in grid_q.range(gq).enumerate() {
            let qrow = qp.row(i);
            let mut running_max = f64::NEG_INFINITY;
            let mut normalizer = 0.0;
            let acc = &mut out_block[local_i * dv..(local_i + 1) * dv];
            for &gk in &selected {
                let krange = grid_k.range(gk);
                let mut block_max = f64::NEG_INFINITY;
                for (slot, j) in krange.clone().enumerate() {
                    let dot: f64 = qrow.iter().zip(kp.row(j)).map(|(a, b)| a * b).sum();
                    let s = dot * scale;
                    logits[slot] = s;
                    block_max = block_max.max(s);
                }
                let new_max = running_max.max(block_max);
                let rescale = if running_max == f64::NEG_INFINITY {
                    0.0
                } else {
                    (running_max - new_max).exp()
                };
                normalizer *= rescale;
                for a in acc.iter_mut() {
                    *a *= rescale;
                }
                for (slot, j) in krange.enumerate() {
                    let w = (logits[slot] - new_max).exp();
                    normalizer += w;
                    for (a, v) in acc.iter_mut().zip(vp.row(j)) {
                        *a += w * v;
                    }
                }
                running_max = new_max;
            }
            for a in acc.iter_mut() {
                *a /= normalizer;
            }
        }
    });

    let permuted = TokenMatrix::new(qp.rows(), dv, out)?;
    let output = unapply_permutation(&permuted, perm_q)?;
    let account = flop_account(mask, grid_q, grid_k, d)?;
    Ok(SparseAttentionResult {
        output,
        pairs_computed: account.pairs_computed,
        density_achieved: account.density_achieved,
    })
}
