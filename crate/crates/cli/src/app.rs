//! Argument parsing and dispatch for the `ocreplay` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use crate::commands::{gradcheck, openset, replay_demo, report, train};
use crate::{CliError, Overrides, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ocreplay",
    version,
    about = "Continual learning with open-set filtered generative replay"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a task sequence and write metrics, open-set tables and a checkpoint.
    Train {
        /// TOML or JSON run config; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Open-set sweep of a trained checkpoint against unknown datasets.
    Openset {
        /// The run's config.json.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Weibull model to use instead of the one in the checkpoint.
        #[arg(long)]
        meta: Option<PathBuf>,
        /// `mnist`, `fashion`, or a directory in MNIST layout (test split is used).
        #[arg(long = "unknown")]
        unknown: Vec<String>,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Finite-difference check of the full loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 6)]
        cases: usize,
        #[arg(long, default_value_t = 100)]
        seed: u64,
        /// Double the analytic gradient of the groups with this name prefix
        /// (e.g. `decoder.out.bias`).
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Generate replay samples and write them as PGM images.
    ReplayDemo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0.01)]
        omega: f64,
        /// Decode prior draws without the Weibull filter.
        #[arg(long)]
        no_filter: bool,
        #[arg(long, default_value_t = 100)]
        max_attempts_factor: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Mean ± std over per-seed run directories, grouped by mode.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            quiet,
        } => {
            let cfg = RunConfig::resolve(config.as_deref(), &overrides)?;
            let result = train::run_train(&cfg, !quiet)?;
            if let Some(r) = result.records.last() {
                println!("{}: alpha_all {:.4} after task {}", cfg.mode, r.alpha_all, r.task);
            }
            Ok(true)
        }
        Command::Openset {
            config,
            checkpoint,
            meta,
            unknown,
            output_dir,
        } => {
            let report = openset::run_openset(&config, &checkpoint, meta.as_deref(), &unknown, &output_dir)?;
            print!("{}", openset::format_report(&report));
            Ok(true)
        }
        Command::Gradcheck {
            cases,
            seed,
            inject_fault,
        } => {
            let report = gradcheck::run(cases, seed, inject_fault.as_deref())?;
            print!("{}", gradcheck::format_report(&report));
            Ok(report.passed())
        }
        Command::ReplayDemo {
            checkpoint,
            meta,
            n,
            omega,
            no_filter,
            max_attempts_factor,
            seed,
            output_dir,
        } => {
            let args = replay_demo::DemoArgs {
                checkpoint: &checkpoint,
                meta: meta.as_deref(),
                n,
                omega,
                filter: !no_filter,
                max_attempts_factor,
                seed,
                output_dir: &output_dir,
            };
            let set = replay_demo::run(&args)?;
            println!(
                "wrote {} samples to {} ({} draws, acceptance {:.4})",
                set.len(),
                output_dir.display(),
                set.attempts,
                set.acceptance_rate
            );
            Ok(true)
        }
        Command::Report { run_dirs, output } => {
            let rows = report::run(&run_dirs, output.as_deref())?;
            print!("{}", report::format_table(&rows));
            Ok(true)
        }
    }
}

/// Runs the command line `args` (program name first) and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
