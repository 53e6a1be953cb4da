use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use densemimo::Error;
use densemimo_cli::config::RunConfig;
use densemimo_cli::run::{cmd_analytic, cmd_selftest, cmd_simulate, Overrides};

/// Spectral-efficiency analysis of dense cellular networks: closed-form
/// sweeps, Monte Carlo simulation and a numerical self-check suite.
#[derive(Parser)]
#[command(name = "densemimo", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Run configuration file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output path, overriding the configuration; '-' writes to stdout.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Cap on the simulation worker pool (default: one per core).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Trials per scenario, overriding the configuration.
    #[arg(long, global = true, value_name = "N")]
    trials: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Closed-form sweep: interference moments, estimation-error bound,
    /// SINR/SE, asymptotics and antenna thresholds.
    Analytic,
    /// Monte Carlo spectral-efficiency sweep over the configured grid.
    Simulate,
    /// Fast numerical invariant checks (fixed seed, well under a minute).
    Selftest,
}

/// Exit codes: 0 success, 1 validation or I/O problem, 2 numerical failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 2,
        _ => 1,
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::validation("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::validation(format!("cannot size the worker pool: {e}")))?;
    }
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        trials: cli.trials,
    };
    match cli.command {
        Cmd::Selftest => cmd_selftest(&mut io::stdout().lock()),
        Cmd::Analytic | Cmd::Simulate => {
            let path = cli.config.ok_or_else(|| {
                Error::validation("--config is required for this subcommand")
            })?;
            let config = RunConfig::load(&path)?;
            match cli.command {
                Cmd::Analytic => cmd_analytic(&config, &overrides),
                Cmd::Simulate => cmd_simulate(&config, &overrides),
                Cmd::Selftest => unreachable!("handled above"),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors; anything else is a usage
            // problem and shares the validation exit code.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
