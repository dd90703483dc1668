//! End-to-end orchestration behind the CLI subcommands.
//!
//! Each head runs selection then sparse execution; when the sequence fits
//! under the dense cap the dense oracle also runs and fidelity metrics are
//! filled in. Heads and sweep cells execute in parallel, and results are
//! assembled in (head, cell) order so reports are deterministic no matter
//! the thread count.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::blocks::{make_grid, BlockGrid};
use crate::dense::{dense_attention, DenseResult};
use crate::diag::{bound_records, captured_mass, correlation_experiment, lemma_fuzz};
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::report::{
    determinism_hash, mean_opt, Aggregate, DiagReport, DiagSeed, HeadMetrics, LemmaSummary, Report,
    RunConfig, SweepReport, SweepRow, COMPENSATION_NOTE, SCHEMA_VERSION,
};
use crate::rng::generate_head;
use crate::select::{apply_permutation, select_pattern, CompMode, Permutation, SortMode};
use crate::sparse::{block_sparse_attention, flop_account};
use crate::tensor::TokenMatrix;

/// Number of lemma fuzz trials a diag run performs.
pub const DIAG_LEMMA_TRIALS: usize = 10_000;

/// Q, K, V triples for every head.
#[derive(Debug, Clone)]
pub struct TensorSet {
    pub heads: Vec<(TokenMatrix, TokenMatrix, TokenMatrix)>,
}

/// File name of one stored tensor, e.g. `q0.batn`.
pub fn tensor_file_name(role: char, head: usize) -> String {
    format!("{role}{head}.batn")
}

/// Writes Q, K, V files for every head into `dir`, returning the paths.
pub fn generate_files(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut paths = Vec::with_capacity(cfg.heads * 3);
    for head in 0..cfg.heads {
        let (q, k, v) = generate_head(cfg.seed, head as u64, cfg.seq_len, cfg.dim, cfg.dist)?;
        for (role, m) in [('q', &q), ('k', &k), ('v', &v)] {
            let path = dir.join(tensor_file_name(role, head));
            write_tensor(&path, m)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Reads the Q, K, V files [`generate_files`] lays out, validating shapes
/// against the config.
pub fn load_tensors(cfg: &RunConfig, dir: &Path) -> Result<TensorSet> {
    let mut heads = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let q = read_tensor(&dir.join(tensor_file_name('q', head)))?;
        let k = read_tensor(&dir.join(tensor_file_name('k', head)))?;
        let v = read_tensor(&dir.join(tensor_file_name('v', head)))?;
        for (name, m) in [("q", &q), ("k", &k), ("v", &v)] {
            if m.rows() != cfg.seq_len {
                return Err(Error::Config {
                    field: "seq_len",
                    reason: format!(
                        "{name}{head}.batn holds {} rows but the config says {}",
                        m.rows(),
                        cfg.seq_len
                    ),
                });
            }
            if m.cols() != cfg.dim {
                return Err(Error::Config {
                    field: "dim",
                    reason: format!(
                        "{name}{head}.batn holds {} columns but the config says {}",
                        m.cols(),
                        cfg.dim
                    ),
                });
            }
        }
        heads.push((q, k, v));
    }
    Ok(TensorSet { heads })
}

/// Pools a dense map over block pairs of the permuted orders without
/// materializing the permuted map.
fn oracle_mass_permuted(
    map: &TokenMatrix,
    perm_q: &Permutation,
    perm_k: &Permutation,
    grid_q: &BlockGrid,
    grid_k: &BlockGrid,
) -> Result<TokenMatrix> {
    let fq = perm_q.forward();
    let fk = perm_k.forward();
    let mut data = Vec::with_capacity(grid_q.n_blocks() * grid_k.n_blocks());
    for rq in grid_q.iter() {
        for rk in grid_k.iter() {
            let mut mass = 0.0;
            for i in rq.clone() {
                let row = map.row(fq[i]);
                for j in rk.clone() {
                    mass += row[fk[j]];
                }
            }
            data.push(mass / rq.len() as f64);
        }
    }
    TokenMatrix::new(grid_q.n_blocks(), grid_k.n_blocks(), data)
}

fn head_metrics(
    cfg: &RunConfig,
    head: usize,
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
) -> Result<HeadMetrics> {
    let started = Instant::now();
    let (perm_q, perm_k, score) = select_pattern(q, k, &cfg.select_config())?;
    let qp = apply_permutation(q, &perm_q)?;
    let kp = apply_permutation(k, &perm_k)?;
    let vp = apply_permutation(v, &perm_k)?;
    let grid_q = make_grid(qp.rows(), cfg.block_size)?;
    let grid_k = make_grid(kp.rows(), cfg.block_size)?;
    let sparse = block_sparse_attention(&qp, &kp, &vp, &grid_q, &grid_k, &score.mask, &perm_q)?;
    let wall_clock_ms = started.elapsed().as_secs_f64() * 1e3;
    let account = flop_account(&score.mask, &grid_q, &grid_k, cfg.dim)?;

    let mut metrics = HeadMetrics {
        head,
        budget: score.budget,
        pairs_computed: sparse.pairs_computed,
        dense_pairs: account.dense_pairs,
        density_achieved: sparse.density_achieved,
        approx_flops: account.approx_flops,
        bound_pairs_checked: 0,
        bound_violations: 0,
        captured_mass: None,
        output_max_abs_err: None,
        output_l2_err: None,
        m_hat_l1_mean: None,
        pearson_unsorted: None,
        pearson_sorted: None,
        wall_clock_ms,
    };

    if cfg.dense_allowed() {
        let DenseResult { output, map } = dense_attention(q, k, v)?;
        let mut max_err: f64 = 0.0;
        let mut sq_err = 0.0;
        for (a, b) in sparse.output.as_slice().iter().zip(output.as_slice()) {
            let diff = (a - b).abs();
            max_err = max_err.max(diff);
            sq_err += diff * diff;
        }
        metrics.output_max_abs_err = Some(max_err);
        metrics.output_l2_err = Some(sq_err.sqrt());

        let m_hat = oracle_mass_permuted(&map, &perm_q, &perm_k, &grid_q, &grid_k)?;
        metrics.captured_mass = Some(captured_mass(&score.mask, &m_hat)?);
        let mut l1_sum = 0.0;
        for (mr, hr) in score.distribution.iter_rows().zip(m_hat.iter_rows()) {
            l1_sum += mr.iter().zip(hr).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
        metrics.m_hat_l1_mean = Some(l1_sum / score.distribution.rows() as f64);

        let records = bound_records(&qp, &kp, &grid_q, &grid_k)?;
        metrics.bound_pairs_checked = records.len();
        metrics.bound_violations = records.iter().filter(|r| !r.holds()).count();

        let (unsorted, sorted) = correlation_experiment(q, k, &cfg.select_config())?;
        metrics.pearson_unsorted = unsorted.pearson_r;
        metrics.pearson_sorted = sorted.pearson_r;
        metrics.bound_pairs_checked += unsorted.points.len() + sorted.points.len();
        metrics.bound_violations += unsorted.bound_violations + sorted.bound_violations;
    }
    Ok(metrics)
}

fn aggregate(heads: &[HeadMetrics]) -> Aggregate {
    let n = heads.len() as f64;
    Aggregate {
        mean_density_achieved: heads.iter().map(|h| h.density_achieved).sum::<f64>() / n,
        total_pairs_computed: heads.iter().map(|h| h.pairs_computed).sum(),
        total_approx_flops: heads.iter().map(|h| h.approx_flops).sum(),
        bound_violations_total: heads.iter().map(|h| h.bound_violations).sum(),
        mean_captured_mass: mean_opt(heads.iter().map(|h| h.captured_mass)),
        mean_output_max_abs_err: mean_opt(heads.iter().map(|h| h.output_max_abs_err)),
        mean_output_l2_err: mean_opt(heads.iter().map(|h| h.output_l2_err)),
        mean_m_hat_l1: mean_opt(heads.iter().map(|h| h.m_hat_l1_mean)),
        mean_pearson_unsorted: mean_opt(heads.iter().map(|h| h.pearson_unsorted)),
        mean_pearson_sorted: mean_opt(heads.iter().map(|h| h.pearson_sorted)),
        wall_clock_ms_total: heads.iter().map(|h| h.wall_clock_ms).sum(),
    }
}

/// Runs the full pipeline for every head, generating inputs from the seed
/// unless a tensor set is supplied.
pub fn execute_run(cfg: &RunConfig, tensors: Option<&TensorSet>) -> Result<Report> {
    cfg.validate()?;
    if let Some(t) = tensors {
        if t.heads.len() != cfg.heads {
            return Err(Error::Config {
                field: "heads",
                reason: format!(
                    "config says {} heads but {} tensor triples were supplied",
                    cfg.heads,
                    t.heads.len()
                ),
            });
        }
    }
    let mut heads: Vec<HeadMetrics> = (0..cfg.heads)
        .into_par_iter()
        .map(|head| match tensors {
            Some(t) => {
                let (q, k, v) = &t.heads[head];
                head_metrics(cfg, head, q, k, v)
            }
            None => {
                let (q, k, v) =
                    generate_head(cfg.seed, head as u64, cfg.seq_len, cfg.dim, cfg.dist)?;
                head_metrics(cfg, head, &q, &k, &v)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    heads.sort_by_key(|h| h.head);

    let mut report = Report {
        schema_version: SCHEMA_VERSION,
        kind: "run".into(),
        config: cfg.clone(),
        compensation_note: COMPENSATION_NOTE.into(),
        aggregate: aggregate(&heads),
        heads,
        determinism_hash: String::new(),
    };
    report.determinism_hash = determinism_hash(&report)?;
    Ok(report)
}

/// Runs the correlation instruments over `seed_count` consecutive seeds
/// plus a lemma fuzz, on head 0 data.
pub fn run_diag(cfg: &RunConfig, seed_count: usize, lemma_trials: usize) -> Result<DiagReport> {
    cfg.validate()?;
    if seed_count == 0 {
        return Err(Error::Config {
            field: "seeds",
            reason: "must be positive".into(),
        });
    }
    if !cfg.dense_allowed() {
        return Err(Error::DenseCapExceeded {
            len: cfg.seq_len,
            cap: cfg.dense_cap,
        });
    }
    let mut seeds: Vec<DiagSeed> = (0..seed_count)
        .into_par_iter()
        .map(|offset| {
            let seed = cfg.seed.wrapping_add(offset as u64);
            let (q, k, _) = generate_head(seed, 0, cfg.seq_len, cfg.dim, cfg.dist)?;
            let (unsorted, sorted) = correlation_experiment(&q, &k, &cfg.select_config())?;
            Ok(DiagSeed {
                seed,
                block_pairs: unsorted.points.len(),
                unsorted_r: unsorted.pearson_r,
                sorted_r: sorted.pearson_r,
                bound_violations: unsorted.bound_violations + sorted.bound_violations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    seeds.sort_by_key(|s| s.seed);

    let fuzz = lemma_fuzz(cfg.seed, lemma_trials);
    let mut report = DiagReport {
        schema_version: SCHEMA_VERSION,
        kind: "diag".into(),
        config: cfg.clone(),
        compensation_note: COMPENSATION_NOTE.into(),
        mean_unsorted_r: mean_opt(seeds.iter().map(|s| s.unsorted_r)),
        mean_sorted_r: mean_opt(seeds.iter().map(|s| s.sorted_r)),
        bound_violations_total: seeds.iter().map(|s| s.bound_violations).sum(),
        seeds,
        lemma: LemmaSummary {
            trials: fuzz.trials,
            violations: fuzz.violations,
            max_slack: fuzz.max_slack,
        },
        determinism_hash: String::new(),
    };
    report.determinism_hash = determinism_hash(&report)?;
    Ok(report)
}

fn canonical_axes(
    densities: &[f64],
    sorts: &[SortMode],
    comps: &[CompMode],
) -> Result<(Vec<f64>, Vec<SortMode>, Vec<CompMode>)> {
    if densities.is_empty() {
        return Err(Error::Empty("density axis"));
    }
    if sorts.is_empty() {
        return Err(Error::Empty("sort axis"));
    }
    if comps.is_empty() {
        return Err(Error::Empty("comp axis"));
    }
    for d in densities {
        if !(*d > 0.0 && *d <= 1.0) {
            return Err(Error::Config {
                field: "density",
                reason: format!("{d} outside (0, 1]"),
            });
        }
    }
    let mut densities = densities.to_vec();
    densities.sort_by(f64::total_cmp);
    densities.dedup();
    let mut sorts = sorts.to_vec();
    sorts.sort();
    sorts.dedup();
    let mut comps = comps.to_vec();
    comps.sort();
    comps.dedup();
    Ok((densities, sorts, comps))
}

/// Runs every (density, sort, comp) cell of the grid over the base config.
///
/// Rows come out lexicographic in (density, sort, comp), with densities
/// ascending and modes in declaration order (none, q, k, qk and none,
/// exact, diag). A failing cell contributes a row with its error message;
/// the other cells still run.
pub fn run_sweep(
    base: &RunConfig,
    densities: &[f64],
    sorts: &[SortMode],
    comps: &[CompMode],
) -> Result<SweepReport> {
    base.validate()?;
    let (densities, sorts, comps) = canonical_axes(densities, sorts, comps)?;
    let mut cells = Vec::new();
    for &density in &densities {
        for &sort in &sorts {
            for &comp in &comps {
                cells.push((density, sort, comp));
            }
        }
    }
    let rows: Vec<SweepRow> = cells
        .into_par_iter()
        .map(|(density, sort, comp)| {
            let cfg = RunConfig {
                density,
                sort,
                comp,
                ..base.clone()
            };
            match execute_run(&cfg, None) {
                Ok(report) => {
                    let pairs = report.heads.first().map(|h| h.pairs_computed);
                    let density_achieved = report.heads.first().map(|h| h.density_achieved);
                    SweepRow {
                        density,
                        sort,
                        comp,
                        captured_mass: report.aggregate.mean_captured_mass,
                        output_max_abs_err: report.aggregate.mean_output_max_abs_err,
                        pairs_computed: pairs,
                        density_achieved,
                        bound_violations: Some(report.aggregate.bound_violations_total),
                        error: String::new(),
                    }
                }
                Err(e) => SweepRow {
                    density,
                    sort,
                    comp,
                    captured_mass: None,
                    output_max_abs_err: None,
                    pairs_computed: None,
                    density_achieved: None,
                    bound_violations: None,
                    error: e.to_string(),
                },
            }
        })
        .collect();

    let mut report = SweepReport {
        schema_version: SCHEMA_VERSION,
        kind: "sweep".into(),
        config: base.clone(),
        compensation_note: COMPENSATION_NOTE.into(),
        rows,
        determinism_hash: String::new(),
    };
    report.determinism_hash = determinism_hash(&report)?;
    Ok(report)
}

/// True when a report carries no bound violations (the exit-code gate).
pub fn report_is_clean(report: &Report) -> bool {
    report.aggregate.bound_violations_total == 0
}
