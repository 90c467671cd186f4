use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use egorse_cli::{aggregate_dir, load_plan, run_experiment};

const EXIT_PLAN: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "egorse", version, about = "High-dimensional Bayesian optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every repetition of a plan and aggregate the histories.
    Run { plan: PathBuf },
    /// Check a plan and print the resolved configuration without evaluating anything.
    Validate { plan: PathBuf },
    /// Aggregate the history CSV files of a directory into aggregate.csv.
    Aggregate { dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { plan } => match load_plan(&plan) {
            Ok(p) => {
                println!("OK\n{p}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("invalid plan {}: {e}", plan.display());
                ExitCode::from(EXIT_PLAN)
            }
        },
        Command::Run { plan } => {
            let resolved = match load_plan(&plan) {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("invalid plan {}: {e}", plan.display());
                    return ExitCode::from(EXIT_PLAN);
                }
            };
            match run_experiment(&resolved) {
                Ok(report) => {
                    for f in &report.run_files {
                        println!("wrote {}", f.display());
                    }
                    if let Some(a) = &report.aggregate_file {
                        println!("wrote {}", a.display());
                    }
                    if let Some(stats) = &report.aggregate {
                        if let (Some(m), Some(s)) = (stats.mean_best.last(), stats.std_best.last()) {
                            println!("final mean best {m:.6} (std {s:.6}) over {} runs", stats.runs);
                        }
                    }
                    if report.is_success() {
                        ExitCode::SUCCESS
                    } else {
                        for (r, m) in &report.failures {
                            eprintln!("run {r} failed: {m}");
                        }
                        ExitCode::from(EXIT_PARTIAL)
                    }
                }
                Err(e @ egorse::EgorseError::Plan(_)) => {
                    eprintln!("{e}");
                    ExitCode::from(EXIT_PLAN)
                }
                Err(e) => {
                    eprintln!("experiment failed: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Aggregate { dir } => match aggregate_dir(&dir) {
            Ok((stats, path)) => {
                println!("aggregated {} runs of {} evaluations into {}", stats.runs, stats.len(), path.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("aggregate failed: {e}");
                ExitCode::FAILURE
            }
        },
    }
}
