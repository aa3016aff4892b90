use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Engine {
    Tbri,
    Hb,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Schedule {
    /// Every interleaving, up to --max-traces.
    Enumerate,
    /// One interleaving drawn with --seed.
    Seed,
}

#[derive(Debug, Parser)]
#[command(name = "tagrace", version, about = "Tag-based data race detection on small concurrent programs")]
pub struct Cli {
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value_t = 10_000)]
    pub max_traces: usize,
    /// Print summaries only.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run detectors over a program's interleavings.
    Run {
        program: PathBuf,
        #[arg(long, value_enum, default_value_t = Engine::Both)]
        engine: Engine,
        #[arg(long, value_enum, default_value_t = Schedule::Enumerate)]
        schedule: Schedule,
        /// Analyze this JSON trace file instead of generating schedules.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Keep only the last four accesses per granule in the oracle.
        #[arg(long)]
        bounded: bool,
    },
    /// Check the detector against the oracle on random programs.
    Fuzz {
        count: usize,
        #[arg(long, default_value_t = 3)]
        max_threads: usize,
        #[arg(long, default_value_t = 8)]
        max_events: usize,
        #[arg(long, default_value_t = 2)]
        max_pointees: usize,
        #[arg(long, default_value_t = 2)]
        max_locks: usize,
        /// Where to write counterexamples, if any.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List or run the labeled corpus.
    Cases {
        #[arg(value_enum)]
        action: CasesAction,
        /// Manifest of case labels (defaults to the built-in one).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory holding `<name>.dsl` sources.
        #[arg(long)]
        corpus_dir: Option<PathBuf>,
    },
    /// Score DataRace reports against case labels.
    Metrics {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Line-delimited JSON as printed by `cases run --format json`.
        #[arg(long)]
        reports: PathBuf,
        /// Count only reports from the first N interleavings of each case.
        #[arg(long)]
        executions: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CasesAction {
    Run,
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(findings) => ExitCode::from(findings as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
