//! Report types and emission.
//!
//! Three report kinds exist: `run` (one attention execution per head),
//! `diag` (bound/correlation instruments plus a lemma fuzz), and `sweep`
//! (a grid of runs). All serialize to snake_case JSON carrying a schema
//! version and a determinism hash: the SHA-256 of the canonical JSON with
//! every wall-clock field zeroed and the hash field itself emptied. Two
//! runs with the same seed and config therefore agree on the hash even
//! when their timings differ.
//!
//! CSV output prints floats with 9 significant digits; absent optional
//! values become empty cells. Wall-clock columns come last so determinism
//! comparisons can strip them.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Dist;
use crate::select::{CompMode, SelectConfig, SortMode};

pub const SCHEMA_VERSION: u32 = 1;

/// The one-layer compensation note every report carries.
pub const COMPENSATION_NOTE: &str =
    "compensation applies to the single attention layer in this artifact";

/// Schema all three report kinds validate against.
pub const REPORT_SCHEMA_JSON: &str = include_str!("../schema/report.schema.json");

// ── configuration ───────────────────────────────────────────────────────

/// Full configuration of one run, echoed verbatim into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seq_len: usize,
    pub dim: usize,
    pub heads: usize,
    pub block_size: usize,
    pub density: f64,
    pub beta: f64,
    pub sort: SortMode,
    pub comp: CompMode,
    pub sort_window: Option<usize>,
    pub dist: Dist,
    pub seed: u64,
    pub dense_cap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seq_len: 512,
            dim: 64,
            heads: 1,
            block_size: 128,
            density: 0.5,
            beta: 1.0,
            sort: SortMode::Qk,
            comp: CompMode::Diag,
            sort_window: None,
            dist: Dist::Gaussian,
            seed: 0,
            dense_cap: 8192,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::Config {
                field: "seq_len",
                reason: "must be positive".into(),
            });
        }
        if self.dim == 0 {
            return Err(Error::Config {
                field: "dim",
                reason: "must be positive".into(),
            });
        }
        if self.heads == 0 {
            return Err(Error::Config {
                field: "heads",
                reason: "must be positive".into(),
            });
        }
        if self.dense_cap == 0 {
            return Err(Error::Config {
                field: "dense_cap",
                reason: "must be positive".into(),
            });
        }
        self.select_config().validate()
    }

    /// The selection-stage slice of this configuration.
    pub fn select_config(&self) -> SelectConfig {
        SelectConfig {
            block_size: self.block_size,
            density: self.density,
            beta: self.beta,
            sort: self.sort,
            comp: self.comp,
            sort_window: self.sort_window,
        }
    }

    /// Whether dense-oracle comparisons are allowed at this length.
    pub fn dense_allowed(&self) -> bool {
        self.seq_len <= self.dense_cap
    }
}

// ── run reports ─────────────────────────────────────────────────────────

/// Metrics for one head of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub head: usize,
    /// Selected key blocks per query block.
    pub budget: usize,
    /// Evaluated (query block, key block) pairs.
    pub pairs_computed: usize,
    pub dense_pairs: usize,
    pub density_achieved: f64,
    pub approx_flops: u64,
    /// Block pairs whose deviation bound was checked (0 when the dense cap
    /// disabled the quadratic instruments).
    pub bound_pairs_checked: usize,
    pub bound_violations: usize,
    /// Oracle mass covered by the selected pattern, when dense ran.
    pub captured_mass: Option<f64>,
    /// Largest entry-wise output difference vs dense, when dense ran.
    pub output_max_abs_err: Option<f64>,
    /// Frobenius norm of the output difference vs dense, when dense ran.
    pub output_l2_err: Option<f64>,
    /// Mean over query blocks of the L1 distance between the selection
    /// distribution row and the oracle mass row, when dense ran.
    pub m_hat_l1_mean: Option<f64>,
    pub pearson_unsorted: Option<f64>,
    pub pearson_sorted: Option<f64>,
    /// Informational timing of the sparse path; excluded from hashing.
    pub wall_clock_ms: f64,
}

/// Means and totals over heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_density_achieved: f64,
    pub total_pairs_computed: usize,
    pub total_approx_flops: u64,
    pub bound_violations_total: usize,
    pub mean_captured_mass: Option<f64>,
    pub mean_output_max_abs_err: Option<f64>,
    pub mean_output_l2_err: Option<f64>,
    pub mean_m_hat_l1: Option<f64>,
    pub mean_pearson_unsorted: Option<f64>,
    pub mean_pearson_sorted: Option<f64>,
    /// Informational; excluded from hashing.
    pub wall_clock_ms_total: f64,
}

/// Report of one `run` invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub kind: String,
    pub config: RunConfig,
    pub compensation_note: String,
    pub heads: Vec<HeadMetrics>,
    pub aggregate: Aggregate,
    pub determinism_hash: String,
}

// ── diag reports ────────────────────────────────────────────────────────

/// Correlation outcome for one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagSeed {
    pub seed: u64,
    pub block_pairs: usize,
    pub unsorted_r: Option<f64>,
    pub sorted_r: Option<f64>,
    pub bound_violations: usize,
}

/// Aggregate of the lemma fuzz inside a diag report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LemmaSummary {
    pub trials: usize,
    pub violations: usize,
    pub max_slack: f64,
}

/// Report of one `diag` invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagReport {
    pub schema_version: u32,
    pub kind: String,
    pub config: RunConfig,
    pub compensation_note: String,
    pub seeds: Vec<DiagSeed>,
    pub mean_unsorted_r: Option<f64>,
    pub mean_sorted_r: Option<f64>,
    pub bound_violations_total: usize,
    pub lemma: LemmaSummary,
    pub determinism_hash: String,
}

// ── sweep reports ───────────────────────────────────────────────────────

/// One cell of a sweep grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub density: f64,
    pub sort: SortMode,
    pub comp: CompMode,
    pub captured_mass: Option<f64>,
    pub output_max_abs_err: Option<f64>,
    /// Per-head evaluated block pairs (equal across heads by construction).
    pub pairs_computed: Option<usize>,
    pub density_achieved: Option<f64>,
    pub bound_violations: Option<usize>,
    /// Empty on success; the failure message when this cell errored.
    pub error: String,
}

/// Report of one `sweep` invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub kind: String,
    pub config: RunConfig,
    pub compensation_note: String,
    pub rows: Vec<SweepRow>,
    pub determinism_hash: String,
}

// ── hashing and emission ────────────────────────────────────────────────

/// Zeroes every wall-clock field and empties every determinism hash in a
/// JSON report, leaving only the reproducible payload.
pub fn zero_wall_clocks(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            for (key, val) in map.iter_mut() {
                if key == "wall_clock_ms" || key == "wall_clock_ms_total" {
                    *val = serde_json::json!(0.0);
                } else if key == "determinism_hash" {
                    *val = serde_json::json!("");
                } else {
                    zero_wall_clocks(val);
                }
            }
        }
        serde_json::Value::Array(items) => {
            for item in items {
                zero_wall_clocks(item);
            }
        }
        _ => {}
    }
}

/// SHA-256 over the canonical JSON of a report, with wall-clock fields
/// zeroed and the hash field emptied first.
pub fn determinism_hash<T: Serialize>(report: &T) -> Result<String> {
    let mut value = serde_json::to_value(report).map_err(|e| Error::Config {
        field: "report",
        reason: e.to_string(),
    })?;
    zero_wall_clocks(&mut value);
    let canonical = serde_json::to_string(&value).map_err(|e| Error::Config {
        field: "report",
        reason: e.to_string(),
    })?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(hex::encode(digest))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(report: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::Config {
        field: "report",
        reason: e.to_string(),
    })?;
    s.push('\n');
    Ok(s)
}

/// Formats a float with 9 significant digits.
pub fn fmt_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

fn fmt_opt_f64(x: Option<f64>) -> String {
    x.map(fmt_sig9).unwrap_or_default()
}

fn fmt_opt_usize(x: Option<usize>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Column order of [`report_to_csv`], wall-clock last.
pub const RUN_CSV_COLUMNS: [&str; 30] = [
    "schema_version",
    "kind",
    "seed",
    "head",
    "seq_len",
    "dim",
    "heads",
    "block_size",
    "density",
    "beta",
    "sort",
    "comp",
    "sort_window",
    "dist",
    "dense_cap",
    "budget",
    "pairs_computed",
    "dense_pairs",
    "density_achieved",
    "approx_flops",
    "bound_pairs_checked",
    "bound_violations",
    "captured_mass",
    "output_max_abs_err",
    "output_l2_err",
    "m_hat_l1_mean",
    "pearson_unsorted",
    "pearson_sorted",
    "determinism_hash",
    "wall_clock_ms",
];

/// One CSV row per head, columns per [`RUN_CSV_COLUMNS`].
pub fn report_to_csv(report: &Report) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RUN_CSV_COLUMNS).map_err(csv_error)?;
    let c = &report.config;
    for h in &report.heads {
        w.write_record([
            report.schema_version.to_string(),
            report.kind.clone(),
            c.seed.to_string(),
            h.head.to_string(),
            c.seq_len.to_string(),
            c.dim.to_string(),
            c.heads.to_string(),
            c.block_size.to_string(),
            fmt_sig9(c.density),
            fmt_sig9(c.beta),
            c.sort.to_string(),
            c.comp.to_string(),
            fmt_opt_usize(c.sort_window),
            c.dist.to_string(),
            c.dense_cap.to_string(),
            h.budget.to_string(),
            h.pairs_computed.to_string(),
            h.dense_pairs.to_string(),
            fmt_sig9(h.density_achieved),
            h.approx_flops.to_string(),
            h.bound_pairs_checked.to_string(),
            h.bound_violations.to_string(),
            fmt_opt_f64(h.captured_mass),
            fmt_opt_f64(h.output_max_abs_err),
            fmt_opt_f64(h.output_l2_err),
            fmt_opt_f64(h.m_hat_l1_mean),
            fmt_opt_f64(h.pearson_unsorted),
            fmt_opt_f64(h.pearson_sorted),
            report.determinism_hash.clone(),
            fmt_sig9(h.wall_clock_ms),
        ])
        .map_err(csv_error)?;
    }
    finish_csv(w)
}

/// Column order of [`sweep_to_csv`].
pub const SWEEP_CSV_COLUMNS: [&str; 9] = [
    "density",
    "sort",
    "comp",
    "captured_mass",
    "output_max_abs_err",
    "pairs_computed",
    "density_achieved",
    "bound_violations",
    "error",
];

/// One CSV row per sweep cell, columns per [`SWEEP_CSV_COLUMNS`].
pub fn sweep_to_csv(report: &SweepReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_CSV_COLUMNS).map_err(csv_error)?;
    for row in &report.rows {
        w.write_record([
            fmt_sig9(row.density),
            row.sort.to_string(),
            row.comp.to_string(),
            fmt_opt_f64(row.captured_mass),
            fmt_opt_f64(row.output_max_abs_err),
            fmt_opt_usize(row.pairs_computed),
            fmt_opt_f64(row.density_achieved),
            fmt_opt_usize(row.bound_violations),
            row.error.clone(),
        ])
        .map_err(csv_error)?;
    }
    finish_csv(w)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Mean of the present values; `None` when none are present.
pub fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values.flatten() {
        sum += v;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}
