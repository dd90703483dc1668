//! Theory-checking instruments.
//!
//! This module holds everything used to verify the approximation story
//! rather than run it: the per-block-pair deviation bound and its
//! empirical counterpart, Pearson correlation between the two, a softmax
//! perturbation probe, the normalization-perturbation lemma verifier, and
//! the captured-oracle-mass recall metric.

use crate::blocks::{block_statistics, BlockGrid, BlockStats};
use crate::dense::token_logits;
use crate::error::{Error, Result};
use crate::select::{
    apply_permutation, block_logits, norm_rank, BlockMask, Permutation, SelectConfig,
};
use crate::tensor::{softmax_into, TokenMatrix};

/// Slack allowed when checking the deviation bound numerically.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Slack allowed when checking the lemma chain numerically.
pub const LEMMA_TOLERANCE: f64 = 1e-12;

// ── deviation bound ─────────────────────────────────────────────────────

/// One block pair's bound and measured deviations.
#[derive(Debug, Clone, Copy)]
pub struct BoundRecord {
    pub pair: (usize, usize),
    /// Upper bound on any token-level deviation from the pooled logit.
    pub bound: f64,
    pub emp_max_dev: f64,
    pub emp_mean_dev: f64,
}

impl BoundRecord {
    pub fn holds(&self) -> bool {
        self.emp_max_dev <= self.bound + BOUND_TOLERANCE
    }
}

/// `U = (R_Q M_K + M_Q R_K + R_Q R_K) / sqrt(d)`.
///
/// `R` is the block radius, `M` the largest member norm. Writing any token
/// as mean plus residual, the logit deviation splits into three dot
/// products, each bounded by Cauchy-Schwarz by one of the terms.
pub fn deviation_bound(stats_q: &BlockStats, stats_k: &BlockStats, d: usize) -> f64 {
    (stats_q.radius * stats_k.max_norm
        + stats_q.max_norm * stats_k.radius
        + stats_q.radius * stats_k.radius)
        / (d as f64).sqrt()
}

/// Exhaustive per-pair deviations between token and block logits.
#[derive(Debug, Clone)]
pub struct DeviationGrid {
    /// `max_{i in gq, j in gk} |l_ij - l_block[gq][gk]|`.
    pub max_dev: TokenMatrix,
    /// Mean absolute deviation over the same pairs.
    pub mean_dev: TokenMatrix,
}

/// Measures how far token logits stray from their pooled block logit.
pub fn empirical_deviation(
    token_l: &TokenMatrix,
    block_l: &TokenMatrix,
    grid_q: &BlockGrid,
    grid_k: &BlockGrid,
) -> Result<DeviationGrid> {
    if token_l.rows() != grid_q.seq_len() || token_l.cols() != grid_k.seq_len() {
        return Err(Error::DimMismatch {
            context: "empirical deviation",
            unit: "token logit entries",
            expected: grid_q.seq_len() * grid_k.seq_len(),
            got: token_l.rows() * token_l.cols(),
        });
    }
    if block_l.rows() != grid_q.n_blocks() || block_l.cols() != grid_k.n_blocks() {
        return Err(Error::DimMismatch {
            context: "empirical deviation",
            unit: "block logit entries",
            expected: grid_q.n_blocks() * grid_k.n_blocks(),
            got: block_l.rows() * block_l.cols(),
        });
    }
    let gq_n = grid_q.n_blocks();
    let gk_n = grid_k.n_blocks();
    let mut max_data = Vec::with_capacity(gq_n * gk_n);
    let mut mean_data = Vec::with_capacity(gq_n * gk_n);
    for gq in 0..gq_n {
        for gk in 0..gk_n {
            let pooled = block_l.get(gq, gk);
            let mut max_dev: f64 = 0.0;
            let mut sum_dev = 0.0;
            let mut count = 0usize;
            for i in grid_q.range(gq) {
                let row = token_l.row(i);
                for j in grid_k.range(gk) {
                    let dev = (row[j] - pooled).abs();
                    max_dev = max_dev.max(dev);
                    sum_dev += dev;
                    count += 1;
                }
            }
            max_data.push(max_dev);
            mean_data.push(sum_dev / count as f64);
        }
    }
    Ok(DeviationGrid {
        max_dev: TokenMatrix::new(gq_n, gk_n, max_data)?,
        mean_dev: TokenMatrix::new(gq_n, gk_n, mean_data)?,
    })
}

/// Bounds and measured deviations for every block pair of one input pair.
///
/// Inputs must already be in execution order; the records line up with the
/// grids row-major.
pub fn bound_records(
    qp: &TokenMatrix,
    kp: &TokenMatrix,
    grid_q: &BlockGrid,
    grid_k: &BlockGrid,
) -> Result<Vec<BoundRecord>> {
    let d = qp.cols();
    let stats_q = block_statistics(qp, grid_q, false)?;
    let stats_k = block_statistics(kp, grid_k, false)?;
    let q_means: Vec<Vec<f64>> = stats_q.iter().map(|s| s.mean.clone()).collect();
    let k_means: Vec<Vec<f64>> = stats_k.iter().map(|s| s.mean.clone()).collect();
    let block_l = block_logits(&q_means, &k_means, d)?;
    let token_l = token_logits(qp, kp)?;
    let devs = empirical_deviation(&token_l, &block_l, grid_q, grid_k)?;

    let mut records = Vec::with_capacity(stats_q.len() * stats_k.len());
    for (gq, sq) in stats_q.iter().enumerate() {
        for (gk, sk) in stats_k.iter().enumerate() {
            records.push(BoundRecord {
                pair: (gq, gk),
                bound: deviation_bound(sq, sk, d),
                emp_max_dev: devs.max_dev.get(gq, gk),
                emp_mean_dev: devs.mean_dev.get(gq, gk),
            });
        }
    }
    Ok(records)
}

// ── correlation ─────────────────────────────────────────────────────────

/// Product-moment correlation; `None` when either series is constant.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::DimMismatch {
            context: "correlation",
            unit: "points",
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::Empty("correlation series (need at least 2 points)"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}

/// Scatter of (bound, measured deviation) over all block pairs.
#[derive(Debug, Clone)]
pub struct CorrelationReport {
    /// One `(bound, emp_max_dev)` point per block pair, row-major.
    pub points: Vec<(f64, f64)>,
    /// `None` when either coordinate is constant across pairs.
    pub pearson_r: Option<f64>,
    /// Whether norm ranking was applied before measuring.
    pub sorted_flag: bool,
    /// Pairs where the measured deviation exceeded the bound.
    pub bound_violations: usize,
}

fn correlation_variant(
    q: &TokenMatrix,
    k: &TokenMatrix,
    block_size: usize,
    sort_window: Option<usize>,
    sorted: bool,
) -> Result<CorrelationReport> {
    let (perm_q, perm_k) = if sorted {
        (norm_rank(q, sort_window)?, norm_rank(k, sort_window)?)
    } else {
        (
            Permutation::identity(q.rows()),
            Permutation::identity(k.rows()),
        )
    };
    let qp = apply_permutation(q, &perm_q)?;
    let kp = apply_permutation(k, &perm_k)?;
    let grid_q = crate::blocks::make_grid(qp.rows(), block_size)?;
    let grid_k = crate::blocks::make_grid(kp.rows(), block_size)?;
    let records = bound_records(&qp, &kp, &grid_q, &grid_k)?;

    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.bound, r.emp_max_dev)).collect();
    let violations = records.iter().filter(|r| !r.holds()).count();
    let r = if points.len() >= 2 {
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        pearson_r(&xs, &ys)?
    } else {
        None
    };
    Ok(CorrelationReport {
        points,
        pearson_r: r,
        sorted_flag: sorted,
        bound_violations: violations,
    })
}

/// Runs the bound-vs-deviation scatter unsorted and norm-sorted on the
/// same data. Only `block_size` and `sort_window` are read from the
/// config.
pub fn correlation_experiment(
    q: &TokenMatrix,
    k: &TokenMatrix,
    cfg: &SelectConfig,
) -> Result<(CorrelationReport, CorrelationReport)> {
    let unsorted = correlation_variant(q, k, cfg.block_size, cfg.sort_window, false)?;
    let sorted = correlation_variant(q, k, cfg.block_size, cfg.sort_window, true)?;
    Ok((unsorted, sorted))
}

// ── softmax perturbation probe ──────────────────────────────────────────

/// Measured sensitivity of row softmax to logit perturbation.
#[derive(Debug, Clone, Copy)]
pub struct LipschitzProbe {
    /// Largest per-row L1 distance between the two softmaxes.
    pub l1_gap_row_max: f64,
    /// Largest entry-wise logit difference.
    pub linf_gap: f64,
    /// `l1_gap_row_max / linf_gap`, `None` when the inputs coincide.
    pub empirical_ratio: Option<f64>,
    /// Largest per-row bound from the normalization lemma.
    pub lemma_bound: f64,
    /// Whether every row's gap stayed within its lemma bound.
    pub holds: bool,
}

/// Compares `softmax(l)` to `softmax(l_hat)` row by row.
///
/// The lemma bound treats each softmax row as a normalized positive vector
/// `exp(row)`. Both rows are shifted by their joint maximum before
/// exponentiating; the shift cancels inside the normalization, so the gap
/// is unchanged, and the lemma applied to the shifted vectors stays exact
/// while the exponentials stay bounded by 1.
pub fn lipschitz_probe(l: &TokenMatrix, l_hat: &TokenMatrix) -> Result<LipschitzProbe> {
    if l.rows() != l_hat.rows() || l.cols() != l_hat.cols() {
        return Err(Error::DimMismatch {
            context: "softmax probe",
            unit: "entries",
            expected: l.rows() * l.cols(),
            got: l_hat.rows() * l_hat.cols(),
        });
    }
    let mut l1_max: f64 = 0.0;
    let mut linf: f64 = 0.0;
    let mut lemma_bound: f64 = 0.0;
    let mut holds = true;
    let mut sa = Vec::new();
    let mut sb = Vec::new();
    for (ra, rb) in l.iter_rows().zip(l_hat.iter_rows()) {
        sa.clear();
        sb.clear();
        softmax_into(ra, &mut sa)?;
        softmax_into(rb, &mut sb)?;
        let l1: f64 = sa.iter().zip(&sb).map(|(a, b)| (a - b).abs()).sum();
        l1_max = l1_max.max(l1);
        for (a, b) in ra.iter().zip(rb) {
            linf = linf.max((a - b).abs());
        }

        let shift = ra
            .iter()
            .chain(rb)
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut alpha = 0.0;
        let mut beta = 0.0;
        let mut l1_diff = 0.0;
        for (a, b) in ra.iter().zip(rb) {
            let ua = (a - shift).exp();
            let vb = (b - shift).exp();
            alpha += ua;
            beta += vb;
            l1_diff += (ua - vb).abs();
        }
        let bound = 4.0 / (alpha + beta) * l1_diff;
        lemma_bound = lemma_bound.max(bound);
        if l1 > bound + LEMMA_TOLERANCE {
            holds = false;
        }
    }
    let ratio = if linf == 0.0 {
        None
    } else {
        Some(l1_max / linf)
    };
    Ok(LipschitzProbe {
        l1_gap_row_max: l1_max,
        linf_gap: linf,
        empirical_ratio: ratio,
        lemma_bound,
        holds,
    })
}

// ── normalization lemma ─────────────────────────────────────────────────

/// One verification of the normalization-perturbation inequality chain.
#[derive(Debug, Clone)]
pub struct LemmaRecord {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Coordinate sums of `u` and `v`.
    pub alpha: f64,
    pub beta: f64,
    /// `||u/alpha - v/beta||_1`.
    pub lhs: f64,
    /// `2 min(1/alpha, 1/beta) ||u - v||_1`.
    pub bound_tight: f64,
    /// `(4 / (alpha + beta)) ||u - v||_1`.
    pub bound_final: f64,
    pub violation: bool,
}

/// Checks `lhs <= bound_tight <= bound_final` for positive `u`, `v`.
pub fn lemma_check(u: &[f64], v: &[f64]) -> Result<LemmaRecord> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            context: "lemma check",
            unit: "entries",
            expected: u.len(),
            got: v.len(),
        });
    }
    if u.is_empty() {
        return Err(Error::Empty("lemma vectors"));
    }
    for (idx, x) in u.iter().enumerate() {
        if !(*x > 0.0) {
            return Err(Error::NonPositive(idx));
        }
    }
    for (idx, x) in v.iter().enumerate() {
        if !(*x > 0.0) {
            return Err(Error::NonPositive(idx));
        }
    }
    let alpha: f64 = u.iter().sum();
    let beta: f64 = v.iter().sum();
    let lhs: f64 = u
        .iter()
        .zip(v)
        .map(|(a, b)| (a / alpha - b / beta).abs())
        .sum();
    let l1_diff: f64 = u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum();
    let bound_tight = 2.0 * (1.0 / alpha).min(1.0 / beta) * l1_diff;
    let bound_final = 4.0 / (alpha + beta) * l1_diff;
    let violation =
        lhs > bound_tight + LEMMA_TOLERANCE || bound_tight > bound_final + LEMMA_TOLERANCE;
    Ok(LemmaRecord {
        u: u.to_vec(),
        v: v.to_vec(),
        alpha,
        beta,
        lhs,
        bound_tight,
        bound_final,
        violation,
    })
}

/// Aggregate of a randomized lemma verification run.
#[derive(Debug, Clone, Copy)]
pub struct LemmaFuzzSummary {
    pub trials: usize,
    pub violations: usize,
    /// Largest `lhs - bound_tight` or `bound_tight - bound_final` seen;
    /// negative when the chain held with room to spare everywhere.
    pub max_slack: f64,
}

/// Runs [`lemma_check`] on seeded random positive vectors of length 2 to
/// 64 with entries in (0, 100].
pub fn lemma_fuzz(seed: u64, trials: usize) -> LemmaFuzzSummary {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut max_slack = f64::NEG_INFINITY;
    for _ in 0..trials {
        let len = rng.random_range(2..=64usize);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            (0..len)
                .map(|_| (1.0 - rng.random::<f64>()) * 100.0)
                .collect::<Vec<f64>>()
        };
        let u = draw(&mut rng);
        let v = draw(&mut rng);
        let rec = lemma_check(&u, &v).expect("fuzz vectors are positive by construction");
        if rec.violation {
            violations += 1;
        }
        max_slack = max_slack
            .max(rec.lhs - rec.bound_tight)
            .max(rec.bound_tight - rec.bound_final);
    }
    LemmaFuzzSummary {
        trials,
        violations,
        max_slack,
    }
}

// ── captured oracle mass ────────────────────────────────────────────────

/// Row-averaged oracle mass covered by a mask: for each query block, the
/// sum of `m_hat` over its selected key blocks, averaged over query blocks.
pub fn captured_mass(mask: &BlockMask, m_hat: &TokenMatrix) -> Result<f64> {
    if mask.rows() != m_hat.rows() || mask.cols() != m_hat.cols() {
        return Err(Error::DimMismatch {
            context: "captured mass",
            unit: "entries",
            expected: m_hat.rows() * m_hat.cols(),
            got: mask.rows() * mask.cols(),
        });
    }
    let mut total = 0.0;
    for (sel, vals) in mask.iter_rows().zip(m_hat.iter_rows()) {
        for (s, v) in sel.iter().zip(vals) {
            if *s {
                total += v;
            }
        }
    }
    Ok(total / mask.rows() as f64)
}
