//! Command-line front end for block-sparse attention experiments.
//!
//! `gen` writes synthetic Q, K, V tensor files, `run` executes the sparse
//! pipeline and reports fidelity metrics, `diag` runs the correlation and
//! lemma instruments, and `sweep` grids density, sort, and compensation
//! settings. Reports go to stdout or `--out` as JSON or CSV. The process
//! exits 0 only when every instrument ran clean: 1 signals a hard error,
//! 2 signals a report carrying bound violations or failed sweep cells.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use batt_core::report::{report_to_csv, sweep_to_csv, to_json_string, RunConfig};
use batt_core::rng::Dist;
use batt_core::runner::{
    execute_run, generate_files, load_tensors, run_diag, run_sweep, DIAG_LEMMA_TRIALS,
};
use batt_core::select::{CompMode, SortMode};
use batt_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "batt",
    version,
    about = "Block-sparse attention benchmark: generate data, run, diagnose, sweep"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Token count per head
    #[arg(long, default_value_t = 512)]
    seq_len: usize,

    /// Embedding dimension
    #[arg(long, default_value_t = 64)]
    dim: usize,

    /// Attention head count
    #[arg(long, default_value_t = 1)]
    heads: usize,

    /// Tokens per block
    #[arg(long, default_value_t = 128)]
    block_size: usize,

    /// Fraction of key blocks kept per query block, in (0, 1]
    #[arg(long, default_value_t = 0.5)]
    density: f64,

    /// Weight on the covariance correction term
    #[arg(long, default_value_t = 1.0)]
    beta: f64,

    /// Norm-based token reordering: none, q, k, or qk
    #[arg(long, default_value_t = SortMode::Qk, value_parser = SortMode::from_str)]
    sort: SortMode,

    /// Restrict sorting to windows of this many tokens
    #[arg(long)]
    sort_window: Option<usize>,

    /// Score correction: none, exact, or diag
    #[arg(long, default_value_t = CompMode::Diag, value_parser = CompMode::from_str)]
    comp: CompMode,

    /// Synthetic data distribution: gaussian or heavy
    #[arg(long, default_value_t = Dist::Gaussian, value_parser = Dist::from_str)]
    dist: Dist,

    /// Base RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Longest sequence the dense oracle is allowed to process
    #[arg(long, default_value_t = 8192)]
    dense_cap: usize,
}

impl ConfigArgs {
    fn to_config(&self) -> RunConfig {
        RunConfig {
            seq_len: self.seq_len,
            dim: self.dim,
            heads: self.heads,
            block_size: self.block_size,
            density: self.density,
            beta: self.beta,
            sort: self.sort,
            comp: self.comp,
            sort_window: self.sort_window,
            dist: self.dist,
            seed: self.seed,
            dense_cap: self.dense_cap,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Format {
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config {
                field: "format",
                reason: format!("unknown format {other:?}, expected json or csv"),
            }),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic Q, K, V tensor files for every head
    Gen {
        #[command(flatten)]
        config: ConfigArgs,

        /// Directory to create the tensor files in
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the sparse pipeline and report per-head metrics
    Run {
        #[command(flatten)]
        config: ConfigArgs,

        /// Directory holding q{h}.batn, k{h}.batn, v{h}.batn files to use
        /// instead of seeded generation
        #[arg(long = "in")]
        input: Option<PathBuf>,

        /// File to write the report to instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,

        /// Report format: json or csv
        #[arg(long, default_value = "json", value_parser = Format::from_str)]
        format: Format,
    },
    /// Run correlation and lemma instruments over consecutive seeds
    Diag {
        #[command(flatten)]
        config: ConfigArgs,

        /// How many consecutive seeds to instrument
        #[arg(long, default_value_t = 1)]
        seeds: usize,

        /// File to write the report to instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,

        /// Report format: diag reports support json only
        #[arg(long, default_value = "json", value_parser = Format::from_str)]
        format: Format,
    },
    /// Grid density, sort, and comp settings over the base config
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,

        /// Density axis, comma separated
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.3, 0.5])]
        densities: Vec<f64>,

        /// Sort axis, comma separated
        #[arg(
            long,
            value_delimiter = ',',
            default_values_t = vec![SortMode::None, SortMode::Qk],
            value_parser = SortMode::from_str
        )]
        sorts: Vec<SortMode>,

        /// Comp axis, comma separated
        #[arg(
            long,
            value_delimiter = ',',
            default_values_t = vec![CompMode::Diag],
            value_parser = CompMode::from_str
        )]
        comps: Vec<CompMode>,

        /// File to write the report to instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,

        /// Report format: json or csv
        #[arg(long, default_value = "json", value_parser = Format::from_str)]
        format: Format,
    },
}

fn init_thread_pool() -> Result<()> {
    let Ok(raw) = std::env::var("BATT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.parse().map_err(|_| Error::Config {
        field: "BATT_THREADS",
        reason: format!("{raw:?} is not a thread count"),
    })?;
    if threads == 0 {
        return Err(Error::Config {
            field: "BATT_THREADS",
            reason: "must be positive".into(),
        });
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config {
            field: "BATT_THREADS",
            reason: e.to_string(),
        })
}

fn emit(text: &str, out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Runs one subcommand; `Ok(true)` means the emitted report was clean.
fn dispatch(command: &Command) -> Result<bool> {
    match command {
        Command::Gen { config, out } => {
            std::fs::create_dir_all(out)?;
            let paths = generate_files(&config.to_config(), out)?;
            for path in paths {
                eprintln!("wrote {}", path.display());
            }
            Ok(true)
        }
        Command::Run {
            config,
            input,
            out,
            format,
        } => {
            let cfg = config.to_config();
            let tensors = match input {
                Some(dir) => Some(load_tensors(&cfg, dir)?),
                None => None,
            };
            let report = execute_run(&cfg, tensors.as_ref())?;
            let text = match format {
                Format::Json => to_json_string(&report)?,
                Format::Csv => report_to_csv(&report)?,
            };
            emit(&text, out.as_ref())?;
            Ok(report.aggregate.bound_violations_total == 0)
        }
        Command::Diag {
            config,
            seeds,
            out,
            format,
        } => {
            if *format == Format::Csv {
                return Err(Error::Config {
                    field: "format",
                    reason: "diag reports support json only".into(),
                });
            }
            let report = run_diag(&config.to_config(), *seeds, DIAG_LEMMA_TRIALS)?;
            emit(&to_json_string(&report)?, out.as_ref())?;
            Ok(report.bound_violations_total == 0 && report.lemma.violations == 0)
        }
        Command::Sweep {
            config,
            densities,
            sorts,
            comps,
            out,
            format,
        } => {
            let report = run_sweep(&config.to_config(), densities, sorts, comps)?;
            let text = match format {
                Format::Json => to_json_string(&report)?,
                Format::Csv => sweep_to_csv(&report)?,
            };
            emit(&text, out.as_ref())?;
            Ok(report
                .rows
                .iter()
                .all(|row| row.error.is_empty() && row.bound_violations.unwrap_or(0) == 0))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_thread_pool() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match dispatch(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
