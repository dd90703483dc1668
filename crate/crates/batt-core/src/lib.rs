//! Block-sparse attention with training-free pattern selection.
//!
//! The pipeline groups query and key tokens into fixed-size blocks,
//! scores every block pair from per-block means, optionally compensates
//! the scores with within-block covariance terms, keeps the top scoring
//! key blocks per query block under a density budget, and then runs
//! streaming softmax attention over only the kept pairs. A dense oracle,
//! an analytic deviation bound, and correlation instruments measure how
//! faithful the sparse result is, and the `batt` binary exposes the whole
//! thing as `gen`, `run`, `diag`, and `sweep` subcommands with JSON and
//! CSV reports.

pub mod blocks;
pub mod dense;
pub mod diag;
pub mod error;
pub mod io;
pub mod report;
pub mod rng;
pub mod runner;
pub mod select;
pub mod sparse;
pub mod tensor;

pub use blocks::{block_statistics, make_grid, BlockGrid, BlockStats};
pub use dense::{dense_attention, dense_attention_capped, oracle_block_mass, DenseResult};
pub use diag::{
    bound_records, captured_mass, correlation_experiment, lemma_check, lemma_fuzz, lipschitz_probe,
    BoundRecord, CorrelationReport, LemmaRecord, LipschitzProbe, BOUND_TOLERANCE, LEMMA_TOLERANCE,
};
pub use error::{Error, Result};
pub use io::{parse_tensor, read_tensor, write_tensor, FORMAT_VERSION};
pub use report::{
    report_to_csv, sweep_to_csv, DiagReport, Report, RunConfig, SweepReport, SCHEMA_VERSION,
};
pub use rng::{derive_seed, generate_head, generate_tokens, Dist, Stream};
pub use runner::{execute_run, generate_files, load_tensors, run_diag, run_sweep, TensorSet};
pub use select::{
    apply_permutation, block_logits, norm_rank, select_pattern, unapply_permutation, BlockMask,
    BlockScore, CompMode, Permutation, SelectConfig, SortMode,
};
pub use sparse::{block_sparse_attention, flop_account, FlopAccount, SparseAttentionResult};
pub use tensor::{l2_norm, row_softmax, TokenMatrix};
