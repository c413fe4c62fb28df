//! `alseg` — command-line driver for the active-learning segmentation
//! workbench: synthetic dataset generation, active-learning runs,
//! random architecture search, and run-directory summaries.
//!
//! Exit codes: 0 success (threshold reached, or command completed),
//! 2 usage/config error, 3 label budget exhausted before the IOU
//! threshold.

mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use alseg_core::acquisition::Acquisition;
use alseg_core::active_learning::{
    compare_acquisitions, run_until_stop, CurveRun, CurveTable, StopReason,
};
use alseg_core::metrics::{emit_al_reports, emit_nas_reports};
use alseg_core::nas::{random_search, space_size};
use alseg_core::synthdata::{generate_dataset, load_dataset, save_dataset, Example};
use alseg_core::RngStream;

use config::RunConfig;

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 2;
const EXIT_BUDGET: u8 = 3;

const DEFAULTS_TABLE: &str = "\
Defaults:
  n_init = 40         initial labeled images
  K = 50              images queried per phase (k_per_phase)
  epochs = 30         training epochs per phase
  T = 30              Monte-Carlo dropout passes per unlabeled image
  threshold = 0.87    stopping mean test IOU (iou_threshold)
  dropout rate 0.5, seed 0, workers 1 (outputs identical for any count)
  learning rates {1e-4, 4e-4, 1e-5, 5e-5, 1e-6, 4e-6}; batches {4, 8, 16}
  gen-data: size 32 (one of 16/32/64/128/256), seed 0";

#[derive(Parser)]
#[command(
    name = "alseg",
    version,
    about = "Active-learning segmentation workbench",
    after_help = DEFAULTS_TABLE
)]
struct Cli {
    /// Worker threads for pool scoring and trial evaluation; outputs are
    /// byte-identical for any value
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic ellipse dataset (image + mask PGMs + manifest)
    #[command(after_help = DEFAULTS_TABLE)]
    GenData(GenDataArgs),
    /// Run the pool-based active-learning loop from a JSON config
    #[command(after_help = DEFAULTS_TABLE)]
    AlRun(ConfigArgs),
    /// Random-search the encoder/decoder/lr/batch space from a JSON config
    #[command(after_help = DEFAULTS_TABLE)]
    NasSearch(ConfigArgs),
    /// Summarize a finished run directory to stdout
    #[command(after_help = DEFAULTS_TABLE)]
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON run config supplying the dataset section (flags override it)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of image/mask pairs
    #[arg(long)]
    n: Option<usize>,
    /// Square image side (16, 32, 64, 128, or 256)
    #[arg(long)]
    size: Option<usize>,
    /// Generation seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding a finished run's CSVs
    #[arg(long)]
    run_dir: PathBuf,
}

/// Usage/config failure carrying the message to print on stderr.
struct CliError(String);

impl<E: std::fmt::Display> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError(e.to_string())
    }
}

type CliResult = Result<u8, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers < 1 {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(EXIT_USAGE);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
        eprintln!("error: could not size the worker pool: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    let outcome = match cli.command {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::AlRun(args) => cmd_al_run(args),
        Cmd::NasSearch(args) => cmd_nas_search(args),
        Cmd::Report(args) => report::cmd_report(args.run_dir),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(CliError(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn cmd_gen_data(args: GenDataArgs) -> CliResult {
    let config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ds = config.dataset.as_ref();
    let n = args
        .n
        .or(ds.and_then(|d| d.n))
        .ok_or(CliError("gen-data needs --n or a dataset.n config entry".into()))?;
    let size = args.size.or(ds.and_then(|d| d.size)).unwrap_or(32);
    let seed = args.seed.or(config.seed).unwrap_or(0);
    let out = args
        .out
        .or(ds.and_then(|d| d.dir.clone()))
        .ok_or(CliError("gen-data needs --out or a dataset.dir config entry".into()))?;

    let examples = generate_dataset(n, size, seed)?;
    save_dataset(&out, &examples, size, seed)?;
    println!("wrote {n} image/mask pairs of size {size}x{size} (seed {seed}) to {}", out.display());
    Ok(EXIT_OK)
}

/// Load the configured dataset and split off the held-out test set
/// (`dataset.test_count` images from the end; default one fifth).
fn load_split(config: &RunConfig) -> Result<(Vec<Example>, Vec<Example>), CliError> {
    let ds = config
        .dataset
        .as_ref()
        .ok_or(CliError("config is missing the dataset section".into()))?;
    let dir = ds.dir.as_ref().ok_or(CliError("config is missing dataset.dir".into()))?;
    let (examples, _manifest) = load_dataset(dir)
        .map_err(|e| CliError(format!("could not load dataset at {}: {e}", dir.display())))?;
    let test_count = ds.test_count.unwrap_or_else(|| (examples.len() / 5).max(1));
    if test_count == 0 || test_count >= examples.len() {
        return Err(CliError(format!(
            "test_count {test_count} must leave both a pool and a test set (dataset has {})",
            examples.len()
        )));
    }
    let split = examples.len() - test_count;
    let mut examples = examples;
    let test = examples.split_off(split);
    Ok((examples, test))
}

fn cmd_al_run(args: ConfigArgs) -> CliResult {
    let config = RunConfig::load(&args.config)?;
    let al = config.al.as_ref().ok_or(CliError("config is missing the al section".into()))?;
    al.config.validate()?;
    let out_dir =
        config.out_dir.as_ref().ok_or(CliError("config is missing out_dir".into()))?;
    let (pool, test) = load_split(&config)?;

    let compare_mode = !al.acquisitions.is_empty() || al.n_seeds > 1;
    let (table, code) = if compare_mode {
        let acquisitions: Vec<Acquisition> = if al.acquisitions.is_empty() {
            vec![al.config.acquisition]
        } else {
            al.acquisitions
                .iter()
                .map(|s| Acquisition::parse(s))
                .collect::<Result<_, _>>()?
        };
        let table = compare_acquisitions(&al.config, &pool, &test, &acquisitions, al.n_seeds)?;
        println!(
            "compared {} acquisitions x {} seeds over {} phases",
            acquisitions.len(),
            al.n_seeds,
            table.runs.first().map_or(0, |r| r.reports.len())
        );
        (table, EXIT_OK)
    } else {
        let (reports, stop) = run_until_stop(&al.config, &pool, &test)?;
        let last = reports.last().expect("a run always has at least one phase");
        println!(
            "{} phases, final labeled {}, final test IOU {:.4}, stopped: {}",
            reports.len(),
            last.labeled_count,
            last.test_iou,
            match stop {
                StopReason::ThresholdReached => "threshold reached",
                StopReason::BudgetExhausted => "label budget exhausted",
                StopReason::PoolExhausted => "unlabeled pool exhausted",
            }
        );
        let code = match stop {
            StopReason::ThresholdReached => EXIT_OK,
            StopReason::BudgetExhausted | StopReason::PoolExhausted => EXIT_BUDGET,
        };
        let run = CurveRun {
            acquisition: al.config.acquisition,
            seed: al.config.seed,
            reports,
        };
        (CurveTable { runs: vec![run] }, code)
    };

    let paths = emit_al_reports(out_dir, &table, pool.len())?;
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(code)
}

fn cmd_nas_search(args: ConfigArgs) -> CliResult {
    let config = RunConfig::load(&args.config)?;
    let search =
        config.search.as_ref().ok_or(CliError("config is missing the search section".into()))?;
    let out_dir =
        config.out_dir.as_ref().ok_or(CliError("config is missing out_dir".into()))?;
    search.space.validate()?;
    let (pool, test) = load_split(&config)?;

    let seed = search.seed.or(config.seed).unwrap_or(0);
    let stream = RngStream::new(seed, "nas");
    let (trials, board) = random_search(
        &search.space,
        search.n_trials,
        search.epochs_per_trial,
        search.without_replacement,
        &pool,
        &test,
        &stream,
    )?;

    let size = space_size(&search.space);
    println!("space_size: {size}");
    println!("{:<5} {:>8} {:>6} {:>9}  {:<18} {}", "rank", "iou", "batch", "lr", "encoder", "decoder");
    for row in board.rows.iter().take(5) {
        println!(
            "{:<5} {:>7.2}% {:>6} {:>9}  {:<18} {}",
            row.rank,
            row.test_iou * 100.0,
            row.batch_size,
            format!("{:e}", row.lr),
            row.encoder,
            row.decoder
        );
    }

    let mut paths = emit_nas_reports(out_dir, &trials, &board)?;
    let summary = serde_json::json!({
        "space_size": size,
        "n_trials": search.n_trials,
        "epochs_per_trial": search.epochs_per_trial,
        "without_replacement": search.without_replacement,
        "seed": seed,
        "failed_trials": trials.iter().filter(|t| t.failed).count(),
    });
    let summary_path = out_dir.join("search_summary.json");
    std::fs::write(&summary_path, format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
    paths.push(summary_path);
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(EXIT_OK)
}
