//! `fednbm`: command-line simulator for federated normal-behaviour models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fednbm::Error;

#[derive(Debug, Parser)]
#[command(name = "fednbm", version, about)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, env = "FEDNBM_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true, env = "FEDNBM_OUT")]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` and `plan.master_seed` in the config.
    #[arg(long, global = true, env = "FEDNBM_SEED")]
    seed: Option<u64>,
    /// Worker threads (0 = one per core). Never changes results.
    #[arg(long, global = true, env = "FEDNBM_JOBS", default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and clean the configured data; report rows removed, missing data and window counts.
    Ingest,
    /// Write the configured synthetic fleet as SCADA CSVs under `--out`.
    SynthGen,
    /// Run the strategy grid and write the report set under `--out`.
    Experiment,
    /// Recompute cold-start curves and speed-ups from an existing cells.csv.
    Coldstart {
        /// Results directory holding cells.csv; defaults to `--out`.
        dir: Option<PathBuf>,
    },
    /// Print the configuration with every default filled in.
    Defaults,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Contract(_) => 4,
        e if e.is_data_error() => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDNBM_LOG", "warn")).init();
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} worker threads: {e}", cli.jobs);
            return ExitCode::from(4);
        }
    };
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        pool.install(|| commands::run(&cli))
    }));
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(4),
    }
}
