mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;

/// Continual instruction tuning with BranchLoRA, MoELoRA and LoRA adapters on
/// synthetic task streams.
#[derive(Debug, Parser)]
#[command(name = "branchlora", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every configured method over the task stream of each seed.
    Run {
        /// Experiment config (JSON). Built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed to run; repeat for several. Replaces the config's seed list.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Worker threads for (seed, method) jobs; 1 runs sequentially.
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory. Overrides BRANCHLORA_OUTPUT_DIR and the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expert-similarity and efficiency reports for a finished run directory.
    Analyze {
        /// Directory written by `run`.
        dir: PathBuf,
        /// Where to write the analysis files (defaults to `dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the accuracy table of a report and write task-wise curves.
    Report {
        /// A report.json written by `run`.
        report: PathBuf,
        /// Where to write taskwise_maa.csv (defaults to the report's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            return CliError::Usage(first.trim_start_matches("error: ").to_string()).report();
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            seeds,
            jobs,
            out,
        } => commands::run(config.as_deref(), &seeds, jobs, out),
        Command::Analyze { dir, out } => commands::analyze(&dir, out.as_deref()),
        Command::Report { report, out } => commands::report(&report, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
