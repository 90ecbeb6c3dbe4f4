use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mibench_cli::config::{parse_config, Overrides};
use mibench_cli::runner;

#[derive(Parser)]
#[command(name = "mibench", about = "Mutual-information estimator benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the worker count for grid cells.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the staircase benchmark grid and emit records and summaries.
    Benchmark,
    /// Run the image self-consistency suite.
    Selfcheck,
    /// Run the bound-verification battery.
    Verify,
    /// Check tape gradients of the miniature models.
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        master_seed: cli.seed,
        out_dir: cli.out,
        workers: cli.workers,
    };
    let config = match parse_config(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };

    let outcome = match cli.command {
        Command::Benchmark => runner::run_benchmark(&config).map(|artifacts| {
            println!(
                "benchmark: {} cells completed, {} aborted",
                artifacts.completed_cells, artifacts.aborted_cells
            );
            artifacts.all_completed
        }),
        Command::Selfcheck => runner::run_selfconsistency(&config).map(|report| {
            for r in &report.ratios {
                println!(
                    "{}: independence={:?} additivity={:?}",
                    r.estimator, r.independence_value, r.additivity_ratios
                );
            }
            report.failures.is_empty()
        }),
        Command::Verify => runner::run_verify_command(&config).map(|report| {
            for c in &report.checks {
                println!(
                    "{} {}: empirical {} vs bound {} (slack {})",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.empirical_value,
                    c.theoretical_bound,
                    c.slack_factor
                );
            }
            report.all_passed
        }),
        Command::Gradcheck => runner::run_gradcheck(&config.out_dir).map(|summary| {
            for (name, err) in &summary.checks {
                println!("{name}: max rel error {err:.3e}");
            }
            summary.pass
        }),
    };

    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
