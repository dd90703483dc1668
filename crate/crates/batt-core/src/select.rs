//! Sparse-pattern selection: norm-based token reordering, pooled block
//! logits, covariance compensation, and top-k mask construction.
//!
//! The pipeline runs in five steps. Tokens are optionally reordered so
//! similar-norm tokens share blocks, block mean embeddings produce a cheap
//! logit per block pair, a nonnegative correction term compensates for the
//! variance the pooling discarded, a row softmax turns corrected logits
//! into a distribution over key blocks, and each query block keeps its
//! top-k key blocks.
//!
//! Selection sorts by the corrected logits; the softmax is monotone within
//! a row, so ranking by distribution values would pick the same blocks.

use crate::blocks::{
    block_means, block_statistics, make_grid, trace_product, BlockGrid, BlockStats,
};
use crate::error::{Error, Result};
use crate::tensor::{l2_norm, row_softmax, TokenMatrix};

// ── permutations ────────────────────────────────────────────────────────

/// Bijection on `0..len` with its inverse precomputed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(len: usize) -> Self {
        let forward: Vec<usize> = (0..len).collect();
        Self {
            inverse: forward.clone(),
            forward,
        }
    }

    /// Validates that `forward` is a bijection and derives the inverse.
    pub fn from_forward(forward: Vec<usize>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = vec![usize::MAX; n];
        for (i, &f) in forward.iter().enumerate() {
            if f >= n {
                return Err(Error::BadPermutation {
                    reason: format!("index {f} out of range for length {n}"),
                });
            }
            if inverse[f] != usize::MAX {
                return Err(Error::BadPermutation {
                    reason: format!("index {f} appears twice"),
                });
            }
            inverse[f] = i;
        }
        Ok(Self { forward, inverse })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &f)| i == f)
    }
}

/// Sorts token indices by ascending Euclidean norm, stably.
///
/// With a window, each contiguous span of `window` tokens is sorted
/// independently (the final span may be shorter); without one the whole
/// sequence is a single span. Ties keep their original relative order.
pub fn norm_rank(x: &TokenMatrix, window: Option<usize>) -> Result<Permutation> {
    if window == Some(0) {
        return Err(Error::ZeroDim("sort window"));
    }
    let n = x.rows();
    let span = window.unwrap_or(n).min(n);
    let norms: Vec<f64> = x.iter_rows().map(l2_norm).collect();
    let mut forward: Vec<usize> = (0..n).collect();
    for chunk in forward.chunks_mut(span) {
        chunk.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]));
    }
    Permutation::from_forward(forward)
}

/// Reorders rows: output row `i` is input row `forward[i]`.
pub fn apply_permutation(x: &TokenMatrix, p: &Permutation) -> Result<TokenMatrix> {
    gather_rows(x, p.forward())
}

/// Undoes [`apply_permutation`]: output row `forward[i]` returns to slot `i`.
pub fn unapply_permutation(x: &TokenMatrix, p: &Permutation) -> Result<TokenMatrix> {
    gather_rows(x, p.inverse())
}

fn gather_rows(x: &TokenMatrix, order: &[usize]) -> Result<TokenMatrix> {
    if order.len() != x.rows() {
        return Err(Error::DimMismatch {
            context: "permutation",
            unit: "rows",
            expected: x.rows(),
            got: order.len(),
        });
    }
    let mut data = Vec::with_capacity(x.rows() * x.cols());
    for &src in order {
        data.extend_from_slice(x.row(src));
    }
    TokenMatrix::new(x.rows(), x.cols(), data)
}

// ── block logits and compensation ───────────────────────────────────────

/// Pooled logits: `l[gq][gk] = (mean_Q[gq] . mean_K[gk]) / sqrt(d)`.
pub fn block_logits(q_means: &[Vec<f64>], k_means: &[Vec<f64>], d: usize) -> Result<TokenMatrix> {
    if d == 0 {
        return Err(Error::ZeroDim("d"));
    }
    for m in q_means.iter().chain(k_means) {
        if m.len() != d {
            return Err(Error::DimMismatch {
                context: "block logits",
                unit: "mean dimensions",
                expected: d,
                got: m.len(),
            });
        }
    }
    if q_means.is_empty() {
        return Err(Error::Empty("query means"));
    }
    if k_means.is_empty() {
        return Err(Error::Empty("key means"));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut data = Vec::with_capacity(q_means.len() * k_means.len());
    for qm in q_means {
        for km in k_means {
            let dot: f64 = qm.iter().zip(km).map(|(a, b)| a * b).sum();
            data.push(dot * scale);
        }
    }
    TokenMatrix::new(q_means.len(), k_means.len(), data)
}

/// Exact second-order correction: `(1/d) tr(Cov_Q Cov_K)`.
///
/// Nonnegative because both covariances are positive semidefinite.
pub fn compensation_exact(stats_q: &BlockStats, stats_k: &BlockStats) -> Result<f64> {
    let d = stats_q.mean.len();
    if stats_k.mean.len() != d {
        return Err(Error::DimMismatch {
            context: "exact compensation",
            unit: "dimensions",
            expected: d,
            got: stats_k.mean.len(),
        });
    }
    let cq = stats_q.cov_full()?;
    let ck = stats_k.cov_full()?;
    Ok(trace_product(cq, ck, d)? / d as f64)
}

/// Diagonal-variance correction, three additive nonnegative terms:
/// `(1/d) sum_t (VarQ_t KBar_t^2 + VarK_t QBar_t^2 + VarQ_t VarK_t)`.
pub fn compensation_diag(stats_q: &BlockStats, stats_k: &BlockStats) -> Result<f64> {
    let d = stats_q.mean.len();
    if stats_k.mean.len() != d {
        return Err(Error::DimMismatch {
            context: "diagonal compensation",
            unit: "dimensions",
            expected: d,
            got: stats_k.mean.len(),
        });
    }
    let mut sum = 0.0;
    for t in 0..d {
        let vq = stats_q.var_diag[t];
        let vk = stats_k.var_diag[t];
        let mq = stats_q.mean[t];
        let mk = stats_k.mean[t];
        sum += vq * mk * mk + vk * mq * mq + vq * vk;
    }
    Ok(sum / d as f64)
}

/// `l' = l + beta * delta`, elementwise.
pub fn compensate(l: &TokenMatrix, delta: &TokenMatrix, beta: f64) -> Result<TokenMatrix> {
    if l.rows() != delta.rows() || l.cols() != delta.cols() {
        return Err(Error::DimMismatch {
            context: "compensation",
            unit: "values",
            expected: l.rows() * l.cols(),
            got: delta.rows() * delta.cols(),
        });
    }
    TokenMatrix::from_fn(l.rows(), l.cols(), |i, j| {
        l.get(i, j) + beta * delta.get(i, j)
    })
}

/// Row softmax over key blocks.
pub fn block_distribution(compensated: &TokenMatrix) -> Result<TokenMatrix> {
    row_softmax(compensated)
}

// ── masks ───────────────────────────────────────────────────────────────

/// Boolean block-pair selection matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BlockMask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::ZeroDim("mask rows"));
        }
        if cols == 0 {
            return Err(Error::ZeroDim("mask cols"));
        }
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                context: "mask data",
                unit: "values",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn all_true(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![true; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[bool]> {
        self.data.chunks_exact(self.cols)
    }

    /// Number of selected entries in one row.
    pub fn row_count(&self, row: usize) -> usize {
        self.row(row).iter().filter(|b| **b).count()
    }

    /// Total number of selected entries.
    pub fn total_true(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    /// True when every selected entry of `self` is also selected in `other`.
    pub fn is_subset_of(&self, other: &BlockMask) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b)
    }
}

/// Per-row budget for a density fraction: `max(1, round(density * n_k))`,
/// clamped to `n_k`. Rounding is f64 half-away-from-zero.
pub fn budget_for_density(density: f64, n_key_blocks: usize) -> usize {
    ((density * n_key_blocks as f64).round() as usize).clamp(1, n_key_blocks)
}

/// Keeps the `k` largest entries of each row, ties broken by lower index.
pub fn topk_mask(distribution: &TokenMatrix, density: f64) -> Result<BlockMask> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config {
            field: "density",
            reason: format!("{density} outside (0, 1]"),
        });
    }
    let n_k = distribution.cols();
    let k = budget_for_density(density, n_k);
    let mut data = vec![false; distribution.rows() * n_k];
    for (i, row) in distribution.iter_rows().enumerate() {
        let mut order: Vec<usize> = (0..n_k).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in &order[..k] {
            data[i * n_k + j] = true;
        }
    }
    BlockMask::new(distribution.rows(), n_k, data)
}

// ── end-to-end selection ────────────────────────────────────────────────

/// Token reordering choices for queries and keys.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum SortMode {
    None,
    Q,
    K,
    Qk,
}

impl SortMode {
    pub fn sorts_q(self) -> bool {
        matches!(self, SortMode::Q | SortMode::Qk)
    }

    pub fn sorts_k(self) -> bool {
        matches!(self, SortMode::K | SortMode::Qk)
    }
}

impl std::str::FromStr for SortMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SortMode::None),
            "q" => Ok(SortMode::Q),
            "k" => Ok(SortMode::K),
            "qk" => Ok(SortMode::Qk),
            other => Err(Error::Config {
                field: "sort",
                reason: format!("unknown sort mode {other:?}, expected none, q, k, or qk"),
            }),
        }
    }
}

impl std::fmt::Display for SortMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SortMode::None => "none",
            SortMode::Q => "q",
            SortMode::K => "k",
            SortMode::Qk => "qk",
        })
    }
}

/// Correction-term choices.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum CompMode {
    None,
    Exact,
    Diag,
}

impl std::str::FromStr for CompMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CompMode::None),
            "exact" => Ok(CompMode::Exact),
            "diag" => Ok(CompMode::Diag),
            other => Err(Error::Config {
                field: "comp",
                reason: format!(
                    "unknown compensation mode {other:?}, expected none, exact, or diag"
                ),
            }),
        }
    }
}

impl std::fmt::Display for CompMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CompMode::None => "none",
            CompMode::Exact => "exact",
            CompMode::Diag => "diag",
        })
    }
}

/// Knobs for one selection run.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectConfig {
    pub block_size: usize,
    pub density: f64,
    pub beta: f64,
    pub sort: SortMode,
    pub comp: CompMode,
    pub sort_window: Option<usize>,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            block_size: 128,
            density: 0.5,
            beta: 1.0,
            sort: SortMode::Qk,
            comp: CompMode::Diag,
            sort_window: None,
        }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config {
                field: "block_size",
                reason: "must be positive".into(),
            });
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config {
                field: "density",
                reason: format!("{} outside (0, 1]", self.density),
            });
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config {
                field: "beta",
                reason: format!("{} is not a finite nonnegative number", self.beta),
            });
        }
        if self.sort_window == Some(0) {
            return Err(Error::Config {
                field: "sort_window",
                reason: "must be positive when given".into(),
            });
        }
        Ok(())
    }
}

/// Everything the selection stage produced for one head.
#[derive(Debug, Clone)]
pub struct BlockScore {
    /// Pooled block logits.
    pub logits: TokenMatrix,
    /// Correction term per block pair, all zeros when compensation is off.
    pub delta: TokenMatrix,
    /// `logits + beta * delta`.
    pub compensated: TokenMatrix,
    /// Row softmax of the compensated logits.
    pub distribution: TokenMatrix,
    /// Selected block pairs.
    pub mask: BlockMask,
    /// Selected key blocks per query block.
    pub budget: usize,
    /// Compensation weight used.
    pub beta: f64,
}

/// Runs the full selection pipeline on raw (unpermuted) Q and K.
///
/// Returns the permutations that were applied (identity when sorting is
/// off) and the block-level scores. Downstream execution must consume K
/// and V in `perm_k` order and queries in `perm_q` order.
pub fn select_pattern(
    q: &TokenMatrix,
    k: &TokenMatrix,
    cfg: &SelectConfig,
) -> Result<(Permutation, Permutation, BlockScore)> {
    cfg.validate()?;
    if q.cols() != k.cols() {
        return Err(Error::DimMismatch {
            context: "pattern selection",
            unit: "feature columns",
            expected: q.cols(),
            got: k.cols(),
        });
    }
    let perm_q = if cfg.sort.sorts_q() {
        norm_rank(q, cfg.sort_window)?
    } else {
        Permutation::identity(q.rows())
    };
    let perm_k = if cfg.sort.sorts_k() {
        norm_rank(k, cfg.sort_window)?
    } else {
        Permutation::identity(k.rows())
    };
    let qp = apply_permutation(q, &perm_q)?;
    let kp = apply_permutation(k, &perm_k)?;

    let grid_q = make_grid(qp.rows(), cfg.block_size)?;
    let grid_k = make_grid(kp.rows(), cfg.block_size)?;
    let score = score_blocks(&qp, &kp, &grid_q, &grid_k, cfg)?;
    Ok((perm_q, perm_k, score))
}

/// Selection on inputs that are already in execution order.
pub fn score_blocks(
    qp: &TokenMatrix,
    kp: &TokenMatrix,
    grid_q: &BlockGrid,
    grid_k: &BlockGrid,
    cfg: &SelectConfig,
) -> Result<BlockScore> {
    let d = qp.cols();
    let q_means = block_means(qp, grid_q)?;
    let k_means = block_means(kp, grid_k)?;
    let logits = block_logits(&q_means, &k_means, d)?;

    let delta = match cfg.comp {
        CompMode::None => TokenMatrix::zeros(grid_q.n_blocks(), grid_k.n_blocks())?,
        CompMode::Exact | CompMode::Diag => {
            let full = cfg.comp == CompMode::Exact;
            let sq = block_statistics(qp, grid_q, full)?;
            let sk = block_statistics(kp, grid_k, full)?;
            let mut data = Vec::with_capacity(sq.len() * sk.len());
            for a in &sq {
                for b in &sk {
                    data.push(match cfg.comp {
                        CompMode::Exact => compensation_exact(a, b)?,
                        _ => compensation_diag(a, b)?,
                    });
                }
            }
            TokenMatrix::new(sq.len(), sk.len(), data)?
        }
    };

    let compensated = compensate(&logits, &delta, cfg.beta)?;
    let distribution = block_distribution(&compensated)?;
    let mask = topk_mask(&distribution, cfg.density)?;
    let budget = budget_for_density(cfg.density, grid_k.n_blocks());
    Ok(BlockScore {
        logits,
        delta,
        compensated,
        distribution,
        mask,
        budget,
        beta: cfg.beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{dense_attention, token_logits};
    use approx::assert_abs_diff_eq;

    fn column(values: &[f64]) -> TokenMatrix {
        TokenMatrix::new(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn norm_rank_sorts_ascending() {
        let p = norm_rank(&column(&[3.0, 1.0, 2.0]), None).unwrap();
        assert_eq!(p.forward(), &[1, 2, 0]);
        assert_eq!(p.inverse(), &[2, 0, 1]);
    }

    #[test]
    fn norm_rank_is_stable_on_ties() {
        let p = norm_rank(&column(&[2.0, -2.0, 2.0]), None).unwrap();
        assert_eq!(p.forward(), &[0, 1, 2]);
        assert!(p.is_identity());
    }

    #[test]
    fn norm_rank_windows_sort_independently() {
        let p = norm_rank(&column(&[3.0, 1.0, 2.0, 0.0]), Some(2)).unwrap();
        assert_eq!(p.forward(), &[1, 0, 3, 2]);
        assert!(norm_rank(&column(&[1.0]), Some(0)).is_err());
    }

    #[test]
    fn permutation_validation_catches_bad_input() {
        assert!(Permutation::from_forward(vec![0, 2]).is_err());
        assert!(Permutation::from_forward(vec![1, 1]).is_err());
        let p = Permutation::from_forward(vec![2, 0, 1]).unwrap();
        assert_eq!(p.inverse(), &[1, 2, 0]);
    }

    #[test]
    fn apply_then_unapply_is_identity() {
        let x = TokenMatrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = Permutation::from_forward(vec![2, 0, 1]).unwrap();
        let y = apply_permutation(&x, &p).unwrap();
        assert_eq!(y.row(0), &[5.0, 6.0]);
        assert_eq!(y.row(1), &[1.0, 2.0]);
        let back = unapply_permutation(&y, &p).unwrap();
        assert_eq!(back, x);

        let wrong = TokenMatrix::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(apply_permutation(&wrong, &p).is_err());
    }

    #[test]
    fn block_logit_hand_values() {
        let l = block_logits(&[vec![1.0, 0.0]], &[vec![0.0, 2.0]], 2).unwrap();
        assert_abs_diff_eq!(l.get(0, 0), 0.0, epsilon = 1e-15);
        let l = block_logits(&[vec![1.0, 1.0]], &[vec![1.0, 1.0]], 2).unwrap();
        assert_abs_diff_eq!(l.get(0, 0), 2.0f64.sqrt(), epsilon = 1e-15);
        assert!(block_logits(&[vec![1.0]], &[vec![1.0, 2.0]], 1).is_err());
    }

    fn stats_from(cov: Vec<f64>, mean: Vec<f64>, count: usize) -> BlockStats {
        let d = mean.len();
        let var_diag = (0..d).map(|t| cov[t * d + t]).collect();
        BlockStats {
            count,
            mean,
            var_diag,
            radius: 0.0,
            max_norm: 0.0,
            cov_full: Some(cov),
        }
    }

    #[test]
    fn exact_compensation_matches_trace_oracle() {
        let zero = stats_from(vec![0.0; 4], vec![0.0, 0.0], 3);
        let other = stats_from(vec![1.0, 0.2, 0.2, 2.0], vec![1.0, -1.0], 3);
        assert_eq!(compensation_exact(&zero, &other).unwrap(), 0.0);

        let sq = stats_from(vec![2.0, 0.0, 0.0, 2.0], vec![0.0, 0.0], 3);
        let sk = stats_from(vec![3.0, 0.0, 0.0, 3.0], vec![0.0, 0.0], 3);
        assert_abs_diff_eq!(compensation_exact(&sq, &sk).unwrap(), 6.0, epsilon = 1e-15);

        let a = stats_from(vec![1.0, 0.5, 0.5, 2.0], vec![0.0, 0.0], 3);
        let b = stats_from(vec![0.7, -0.1, -0.1, 0.4], vec![0.0, 0.0], 3);
        let brute = (1.0 * 0.7 + 0.5 * -0.1 + 0.5 * -0.1 + 2.0 * 0.4) / 2.0;
        assert_abs_diff_eq!(compensation_exact(&a, &b).unwrap(), brute, epsilon = 1e-15);

        let no_cov = BlockStats {
            cov_full: None,
            ..zero.clone()
        };
        assert!(matches!(
            compensation_exact(&no_cov, &other),
            Err(Error::MissingCovariance)
        ));
    }

    #[test]
    fn diag_compensation_hand_values() {
        let sq = stats_from(vec![1.0], vec![2.0], 4);
        let sk = stats_from(vec![4.0], vec![3.0], 4);
        assert_abs_diff_eq!(compensation_diag(&sq, &sk).unwrap(), 29.0, epsilon = 1e-15);

        let cq = stats_from(vec![0.0; 4], vec![5.0, -1.0], 2);
        let ck = stats_from(vec![0.0; 4], vec![2.0, 2.0], 2);
        assert_eq!(compensation_diag(&cq, &ck).unwrap(), 0.0);
    }

    #[test]
    fn diag_equals_exact_for_diagonal_zero_mean_blocks() {
        let sq = stats_from(vec![1.5, 0.0, 0.0, 0.25], vec![0.0, 0.0], 5);
        let sk = stats_from(vec![0.5, 0.0, 0.0, 4.0], vec![0.0, 0.0], 5);
        let exact = compensation_exact(&sq, &sk).unwrap();
        let diag = compensation_diag(&sq, &sk).unwrap();
        assert_abs_diff_eq!(exact, diag, epsilon = 1e-10);
        assert_abs_diff_eq!(exact, (1.5 * 0.5 + 0.25 * 4.0) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn compensate_is_elementwise() {
        let l = TokenMatrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        let d = TokenMatrix::new(1, 2, vec![1.0, 0.5]).unwrap();
        let out = compensate(&l, &d, 2.0).unwrap();
        assert_eq!(out.row(0), &[2.0, 2.0]);
        let same = compensate(&l, &d, 0.0).unwrap();
        assert_eq!(same, l);
        let zero = TokenMatrix::zeros(1, 2).unwrap();
        assert_eq!(compensate(&l, &zero, 3.0).unwrap(), l);
    }

    #[test]
    fn topk_hand_masks() {
        let m = TokenMatrix::new(1, 3, vec![0.1, 0.5, 0.4]).unwrap();
        let mask = topk_mask(&m, 2.0 / 3.0).unwrap();
        assert_eq!(mask.row(0), &[false, true, true]);

        let tie = TokenMatrix::new(1, 3, vec![0.4, 0.4, 0.2]).unwrap();
        let mask = topk_mask(&tie, 1.0 / 3.0).unwrap();
        assert_eq!(mask.row(0), &[true, false, false]);

        let full = topk_mask(&m, 1.0).unwrap();
        assert_eq!(full.row(0), &[true, true, true]);

        assert!(topk_mask(&m, 0.0).is_err());
        assert!(topk_mask(&m, 1.5).is_err());
    }

    #[test]
    fn budget_rounding_is_half_away_from_zero() {
        assert_eq!(budget_for_density(0.5, 3), 2);
        assert_eq!(budget_for_density(0.5, 16), 8);
        assert_eq!(budget_for_density(0.1, 4), 1);
        assert_eq!(budget_for_density(1.0, 7), 7);
        assert_eq!(budget_for_density(0.01, 100), 1);
    }

    #[test]
    fn degenerate_config_reproduces_dense_map() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let q = TokenMatrix::from_fn(6, 3, |_, _| rng.random_range(-2.0..2.0)).unwrap();
        let k = TokenMatrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0)).unwrap();
        let cfg = SelectConfig {
            block_size: 1,
            density: 1.0,
            beta: 1.0,
            sort: SortMode::None,
            comp: CompMode::None,
            sort_window: None,
        };
        let (pq, pk, score) = select_pattern(&q, &k, &cfg).unwrap();
        assert!(pq.is_identity());
        assert!(pk.is_identity());
        assert_eq!(score.mask.total_true(), 30);

        let v = TokenMatrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0)).unwrap();
        let dense = dense_attention(&q, &k, &v).unwrap();
        assert!(score.distribution.max_abs_diff(&dense.map).unwrap() <= 1e-12);
        assert!(
            score
                .logits
                .max_abs_diff(&token_logits(&q, &k).unwrap())
                .unwrap()
                <= 1e-12
        );
    }

    #[test]
    fn fig_scale_pipeline_shapes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let q = TokenMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let k = TokenMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let cfg = SelectConfig {
            block_size: 2,
            density: 0.5,
            ..SelectConfig::default()
        };
        let (_, _, score) = select_pattern(&q, &k, &cfg).unwrap();
        assert_eq!(score.distribution.rows(), 3);
        assert_eq!(score.distribution.cols(), 3);
        assert_eq!(score.budget, 2);
        for i in 0..3 {
            assert_eq!(score.mask.row_count(i), 2);
        }
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        fn matrix(
            rows: std::ops::Range<usize>,
            cols: std::ops::Range<usize>,
        ) -> impl Strategy<Value = TokenMatrix> {
            (rows, cols).prop_flat_map(|(r, c)| {
                proptest::collection::vec(-10.0f64..10.0, r * c)
                    .prop_map(move |data| TokenMatrix::new(r, c, data).unwrap())
            })
        }

        proptest! {
            #[test]
            fn norm_rank_orders_norms(m in matrix(1..30, 1..5)) {
                let p = norm_rank(&m, None).unwrap();
                let sorted = apply_permutation(&m, &p).unwrap();
                let norms: Vec<f64> = sorted.iter_rows().map(l2_norm).collect();
                for w in norms.windows(2) {
                    prop_assert!(w[0] <= w[1] + 1e-12);
                }
            }

            #[test]
            fn permutation_round_trip(m in matrix(1..30, 1..5), window in proptest::option::of(1usize..8)) {
                let p = norm_rank(&m, window).unwrap();
                let back = unapply_permutation(&apply_permutation(&m, &p).unwrap(), &p).unwrap();
                prop_assert_eq!(back, m);
            }

            #[test]
            fn delta_is_nonnegative_and_raises_logits(
                q in matrix(2..24, 1..5),
                kseed in 0u64..500,
                comp in prop_oneof![Just(CompMode::Exact), Just(CompMode::Diag)],
            ) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(kseed);
                let k = TokenMatrix::from_fn(rng.random_range(2..24), q.cols(),
                    |_, _| rng.random_range(-10.0..10.0)).unwrap();
                let cfg = SelectConfig {
                    block_size: 3,
                    density: 0.5,
                    beta: 1.0,
                    sort: SortMode::None,
                    comp,
                    sort_window: None,
                };
                let (_, _, score) = select_pattern(&q, &k, &cfg).unwrap();
                for i in 0..score.delta.rows() {
                    for j in 0..score.delta.cols() {
                        prop_assert!(score.delta.get(i, j) >= -1e-12);
                        prop_assert!(score.compensated.get(i, j) >= score.logits.get(i, j) - 1e-12);
                    }
                }
            }

            #[test]
            fn distribution_rows_sum_to_one(q in matrix(2..24, 1..5), k in matrix(2..24, 1..5)) {
                prop_assume!(q.cols() == k.cols());
                let cfg = SelectConfig { block_size: 4, ..SelectConfig::default() };
                let (_, _, score) = select_pattern(&q, &k, &cfg).unwrap();
                for row in score.distribution.iter_rows() {
                    let s: f64 = row.iter().sum();
                    prop_assert!((s - 1.0).abs() <= 1e-10);
                }
            }

            #[test]
            fn mask_rows_hold_exactly_budget(
                q in matrix(2..40, 2..4),
                k in matrix(2..40, 2..4),
                density in 0.05f64..1.0,
            ) {
                prop_assume!(q.cols() == k.cols());
                let cfg = SelectConfig {
                    block_size: 4,
                    density,
                    ..SelectConfig::default()
                };
                let (_, _, score) = select_pattern(&q, &k, &cfg).unwrap();
                prop_assert!(score.budget >= 1);
                prop_assert!(score.budget <= score.mask.cols());
                for i in 0..score.mask.rows() {
                    prop_assert_eq!(score.mask.row_count(i), score.budget);
                }
            }

            #[test]
            fn masks_grow_with_density(m in matrix(1..10, 2..10), lo in 0.05f64..0.95) {
                let dist = row_softmax(&m).unwrap();
                let hi = (lo + 0.05).min(1.0);
                let small = topk_mask(&dist, lo).unwrap();
                let large = topk_mask(&dist, hi).unwrap();
                prop_assert!(small.is_subset_of(&large));
                let full = topk_mask(&dist, 1.0).unwrap();
                prop_assert_eq!(full.total_true(), dist.rows() * dist.cols());
            }

            #[test]
            fn sorting_commutes_with_scoring(
                q in matrix(4..32, 1..5),
                kseed in 0u64..500,
            ) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(kseed);
                let k = TokenMatrix::from_fn(rng.random_range(4..32), q.cols(),
                    |_, _| rng.random_range(-10.0..10.0)).unwrap();
                let sorted_cfg = SelectConfig {
                    block_size: 3,
                    sort: SortMode::Qk,
                    ..SelectConfig::default()
                };
                let (pq, pk, sorted_score) = select_pattern(&q, &k, &sorted_cfg).unwrap();

                let qp = apply_permutation(&q, &pq).unwrap();
                let kp = apply_permutation(&k, &pk).unwrap();
                let plain_cfg = SelectConfig { sort: SortMode::None, ..sorted_cfg };
                let (_, _, pre_score) = select_pattern(&qp, &kp, &plain_cfg).unwrap();

                prop_assert!(sorted_score.logits.max_abs_diff(&pre_score.logits).unwrap() <= 1e-12);
                prop_assert!(sorted_score.delta.max_abs_diff(&pre_score.delta).unwrap() <= 1e-12);
                prop_assert_eq!(&sorted_score.mask, &pre_score.mask);
            }
        }
    }
}
