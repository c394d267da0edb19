//! `bench`: run optimizer experiments, dump Fisher diagnostics, and list the
//! built-in problems.

use clap::{Parser, Subcommand};
use kfac_bench::{checkpoint, config, dataset, diag, experiment, BenchError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "bench", about = "Benchmark harness for the K-FAC optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured experiment and write metrics, checkpoint, summary.
    Run {
        /// Path to a key = value config file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if absent).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dense Fisher diagnostics for a small checkpoint.
    Diag {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Factored Tikhonov damping strength for the inverses.
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// List built-in problems.
    ListProblems,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, seed } => {
            let text = match std::fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read config {}: {e}", config.display());
                    return ExitCode::from(2);
                }
            };
            let mut cfg = match config::parse(&text) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            match experiment::run_experiment(&cfg, &out) {
                Ok(outcome) => {
                    println!(
                        "done: {} iterations, final train error {}, summary at {}",
                        outcome.summary.iterations,
                        outcome.summary.final_train_error,
                        outcome.summary_path.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(BenchError::NumericalAbort(msg)) => {
                    eprintln!("numerical abort: {msg}");
                    ExitCode::from(3)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Diag {
            checkpoint: ck_path,
            gamma,
            out,
        } => {
            let run = || -> kfac_bench::Result<()> {
                let ck = checkpoint::read(&ck_path)?;
                let problem = experiment::problem_for_checkpoint(&ck)?;
                diag::dump_fisher_diagnostics(&problem, &ck.theta, gamma, &out, 0)?;
                Ok(())
            };
            match run() {
                Ok(()) => {
                    println!("diagnostics written to {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::ListProblems => {
            for name in dataset::BUILTIN_PROBLEMS {
                println!("{name}");
            }
            println!("file:<path>  (raw matrix file; header: rows cols targets_cols)");
            ExitCode::SUCCESS
        }
    }
}
