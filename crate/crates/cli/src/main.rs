//! `fedlora` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;

/// Federated LoRA fine-tuning simulator.
///
/// Log verbosity is controlled by the RUST_LOG environment variable
/// (default: info).
#[derive(Debug, Parser)]
#[command(name = "fedlora", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (JSON).
    config: PathBuf,
    /// Override a config leaf, e.g. `--set fed.eta=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for client updates (1 = sequential, bit-deterministic).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run federated training and write rounds.jsonl, summary.json and checkpoints.
    TrainFederated(RunArgs),
    /// Train on the pooled data without partitioning or aggregation.
    TrainCentralized(RunArgs),
    /// Run a grid of (clients, local epochs, rounds) cells and write ablation.csv.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Grid cell `K,E,R`. Repeatable; replaces the config's grid.
        #[arg(long = "grid", value_name = "K,E,R")]
        grid: Vec<String>,
        /// Comma-separated base seeds; replaces the config's seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Print per-round metrics and communication totals of a finished run.
    Report {
        /// Directory containing rounds.jsonl.
        run_dir: PathBuf,
        /// Also write round-vs-metric CSV for plotting.
        #[arg(long, value_name = "PATH")]
        plot_csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::TrainFederated(args) => commands::train(&args.into(), fedlora::runner::Mode::Federated),
        Command::TrainCentralized(args) => commands::train(&args.into(), fedlora::runner::Mode::Centralized),
        Command::Ablate { run, grid, seeds } => commands::ablate(&run.into(), &grid, &seeds),
        Command::Report { run_dir, plot_csv } => commands::report(&run_dir, plot_csv.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Runtime(_) => 1,
            })
        }
    }
}

impl From<RunArgs> for commands::RunOptions {
    fn from(a: RunArgs) -> Self {
        Self {
            config: a.config,
            overrides: a.overrides,
            threads: a.threads,
            output_dir: a.output_dir,
        }
    }
}
