use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

mod commands;

#[derive(Parser)]
#[command(name = "nbrestore", version, about = "Executability triage and restoration for Jupyter notebooks")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct GlobalOpts {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Never touch the network: model replies come from the replay store and
    /// repository search from the offline index.
    #[arg(long, global = true)]
    pub offline: bool,
    /// Replay recorded executions and model replies from DIR
    /// (DIR/traces, DIR/llm, DIR/packages.json).
    #[arg(long, global = true, value_name = "DIR")]
    pub replay: Option<PathBuf>,
    /// Per-notebook execution limit, e.g. `30s` or `10m`.
    #[arg(long, global = true, value_parser = humantime::parse_duration)]
    pub timeout: Option<Duration>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Search tiered repositories, fetch them and write a sample manifest.
    Mine {
        /// Corpus directory; defaults to the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Offline repository index (JSON) to search instead of the API.
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Screen notebooks and check that every code cell compiles.
    Scan {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Execute notebooks and classify their first error.
    Exec {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Directory for `results.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the error-driven restoration loop.
    Restore {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Directory for traces and `results.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate results and traces into summary tables.
    Report {
        /// Result files, trace files or directories holding them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_values_t = [Format::Json, Format::Csv])]
        format: Vec<Format>,
        /// Add a per-star-tier breakdown using the configured tiers.
        #[arg(long)]
        tiers: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .init();

    let result = commands::Pipeline::new(&cli.global).and_then(|p| match cli.command {
        Command::Mine { out, index } => p.mine(out, index),
        Command::Scan { paths } => p.scan(&paths),
        Command::Exec { paths, out } => p.exec(&paths, out.as_deref()),
        Command::Restore { paths, out } => p.restore(&paths, out.as_deref()),
        Command::Report {
            inputs,
            out,
            format,
            tiers,
        } => {
            let formats = format
                .into_iter()
                .map(|f| match f {
                    Format::Json => nbrestore::report::EmitFormat::Json,
                    Format::Csv => nbrestore::report::EmitFormat::Csv,
                })
                .collect::<Vec<_>>();
            p.report(&inputs, &out, &formats, tiers)
        }
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
