mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "sgs", version, about = "Self-guided self-play on modular arithmetic puzzles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a problem set and write dataset.json.
    GenDataset {
        /// Dataset generator settings (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train in-process and write metrics.jsonl and checkpoints.
    Run {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fit the scaling law to one metrics file and write fit.json.
    Fit {
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        /// Add end-truncation and subsample refits.
        #[arg(long)]
        robustness: bool,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one problem exhaustively.
    Oracle {
        /// Problem JSON, e.g. {"m":7,"s":1,"t":4,"ops":[["add",1],["mul",2]],"budget":3}
        #[arg(long)]
        problem: String,
    },
    /// Train with rollouts dispatched to remote workers over HTTP.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        /// Heartbeat timeout before a silent worker is declared dead.
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
    },
    /// Pull and execute tasks from a server.
    Work {
        #[arg(long)]
        addr: String,
        /// Exit after this long without work (runs until the server goes away otherwise).
        #[arg(long)]
        timeout_secs: Option<u64>,
        #[arg(long)]
        worker_id: Option<String>,
        #[arg(long)]
        max_tasks: Option<usize>,
    },
    /// Compare runs: aligned curves in report.csv, summary on stdout.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        /// Fit each run and show its asymptote.
        #[arg(long)]
        asymptotes: bool,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's mode.
    #[arg(long)]
    mode: Option<String>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Ignore points below this generation count.
    #[arg(long, default_value_t = 0)]
    c_min: u64,
    /// Pin R0 to the first retained point instead of the first point.
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    recenter: bool,
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("SGS_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
