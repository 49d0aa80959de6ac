use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use batchvar::cli::config::load_config;
use batchvar::cli::runner::{run_experiment, selfcheck, Assertion, Overrides};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "batchvar", version, about = "Gradient variance of mini-batch SGD versus batch size")]
struct Cli {
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the experiment described by a JSON config.
    Run { config: PathBuf },
    /// Parses and validates a config without running it.
    Validate { config: PathBuf },
    /// Runs the built-in consistency checks.
    Selfcheck,
}

fn report(assertions: &[Assertion]) -> bool {
    for a in assertions {
        println!("[{}] {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
    }
    assertions.iter().all(|a| a.passed)
}

fn execute(cli: Cli) -> anyhow::Result<bool> {
    let overrides = Overrides {
        output_dir: cli.output_dir,
        seed: cli.seed,
    };
    match cli.command {
        Command::Validate { config } => {
            load_config(&config)?;
            println!("{}: ok", config.display());
            Ok(true)
        }
        Command::Run { config } => {
            let loaded = load_config(&config)?;
            let outcome = run_experiment(&loaded, &overrides)?;
            let ok = report(&outcome.assertions);
            println!("wrote {} files to {}", outcome.files.len(), outcome.output_dir.display());
            Ok(ok)
        }
        Command::Selfcheck => Ok(report(&selfcheck(overrides.seed.unwrap_or(0))?)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    let result = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building thread pool")
            .and_then(|pool| pool.install(|| execute(cli))),
        None => execute(cli),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
