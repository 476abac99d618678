//! `chatac`: curate chat corpora, train the n-gram baseline, and run
//! offline autocomplete evaluations and latency sweeps.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chatac_core::corpus::ContextCap;
use chatac_core::metrics::Budget;
use chatac_core::{ExpansionPolicy, SuggestionMode};

use config::DatasetFormat;

/// Marks an error caused by the user's input or configuration (exit 2).
#[derive(Debug)]
pub struct InvalidInput(pub String);

impl std::fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidInput {}

#[derive(Parser)]
#[command(name = "chatac", version, about = "Offline evaluation of chat autocomplete")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw dump into canonical JSONL and print corpus statistics.
    Curate(CurateArgs),
    /// Print statistics of a canonical JSONL corpus.
    Stats(StatsArgs),
    /// Train the n-gram baseline on a canonical corpus.
    TrainNgram(TrainArgs),
    /// Simulate every turn at each k and write the step log and reports.
    Run(RunArgs),
    /// Evaluate a grid of generation settings at k=100 and pick the best
    /// setting per latency budget.
    Sweep(SweepArgs),
    /// Rebuild a report from a step log.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct CurateArgs {
    /// Raw dump format.
    #[arg(long, value_enum)]
    pub dataset: RawFormat,
    #[arg(long)]
    pub input: PathBuf,
    /// Split label used in output names.
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Canonical output; defaults to `<dataset>-<split>.jsonl` in the
    /// current directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write char and word-boundary instance caches next to the output.
    #[arg(long)]
    pub instance_cache: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum RawFormat {
    Oasst,
    Sharegpt,
}

#[derive(Args)]
pub struct StatsArgs {
    /// Canonical JSONL corpus.
    pub input: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Canonical JSONL corpus (training split).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub order: usize,
    /// Interpolation weights, highest order first.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.01)]
    pub unk_floor: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything a run or sweep can take from the command line. Any flag given
/// overrides the config file.
#[derive(Args, Default)]
pub struct RunArgs {
    /// TOML config, JSON config, or a report whose embedded config to rerun.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<DatasetFormat>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub max_turns: Option<usize>,
    #[arg(long)]
    pub min_turn_len: Option<usize>,
    #[arg(long)]
    pub unique_contexts: bool,
    /// ngram, http, oracle, null or synthetic.
    #[arg(long)]
    pub provider: Option<String>,
    /// N-gram model file (implies the ngram provider).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Provider URL (implies the http provider; default from CHAITEA_ENDPOINT).
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Report modelled instead of measured n-gram latency, for
    /// byte-reproducible outputs.
    #[arg(long)]
    pub virtual_timing: bool,
    #[arg(long)]
    pub hit_rate: Option<f64>,
    /// best (n_c=5, n_t=20) or fast (n_c=1, n_t=5).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub n_c: Option<usize>,
    #[arg(long)]
    pub n_t: Option<usize>,
    #[arg(long)]
    pub policy: Option<ExpansionPolicy>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Context cap in characters, or "full".
    #[arg(long)]
    pub history_cap: Option<ContextCap>,
    /// word or char.
    #[arg(long)]
    pub mode: Option<SuggestionMode>,
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long, env = "CHAITEA_SEED")]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Latency budgets in ms; "inf" for unbounded.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<Budget>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_n_c: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_n_t: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_caps: Option<Vec<ContextCap>>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Step log written by `run`.
    #[arg(long)]
    pub from: PathBuf,
    /// Report JSON destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the per-k curve as CSV.
    #[arg(long)]
    pub plot_csv: Option<PathBuf>,
    /// Write the accepted-length histogram as CSV.
    #[arg(long)]
    pub hist_csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Curate(a) => commands::curate(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::TrainNgram(a) => commands::train_ngram(&a),
        Command::Run(a) => commands::run(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<InvalidInput>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
