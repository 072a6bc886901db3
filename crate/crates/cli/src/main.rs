use std::path::PathBuf;
use std::process::ExitCode;

use anarchy_track::harness::{bound_report, load_config, poa_report, run_experiment};
use anarchy_track::Error;
use clap::{Parser, Subcommand};

const WORKERS_ENV: &str = "ANARCHY_TRACK_WORKERS";

/// Monte Carlo channel tracking experiments under pilot collisions.
#[derive(Parser)]
#[command(name = "anarchy-track", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured trackers and write metrics.csv and aggregate.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (ANARCHY_TRACK_WORKERS takes precedence).
        #[arg(long)]
        workers: Option<usize>,
        /// Emit rows for every device instead of device 1 only.
        #[arg(long)]
        all_devices: bool,
    },
    /// Estimate the price of anarchy at slot `t`.
    Poa {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        trials: usize,
    },
    /// Evaluate the single-step price-of-anarchy bound.
    Bound {
        #[arg(long)]
        config: PathBuf,
    },
}

fn workers(flag: Option<usize>) -> Result<Option<usize>, Error> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::InvalidParameter(format!(
                "{WORKERS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(flag),
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            out,
            trials,
            seed,
            workers: flag,
            all_devices,
        } => {
            let mut spec = load_config(&config)?;
            spec.outputs = out;
            if let Some(n) = trials {
                spec.scenario.trials = n;
            }
            if let Some(s) = seed {
                spec.scenario.seed = s;
            }
            spec.all_devices |= all_devices;
            spec.validate()?;
            let written = run_experiment(&spec, workers(flag)?)?;
            println!("{}", written.metrics_path.display());
            println!("{}", written.aggregate_path.display());
            if let Some(p) = written.poa_path {
                println!("{}", p.display());
            }
        }
        Command::Poa { config, t, trials } => {
            let spec = load_config(&config)?;
            let r = poa_report(&spec.scenario, t, trials)?;
            println!("t={t}");
            println!("trials={}", r.trials);
            println!("coordinated_mmse={:.16e}", r.coordinated_mmse);
            println!("uncoordinated_mse={:.16e}", r.uncoordinated_mse);
            println!("poa={:.16e}", r.poa);
            println!("std_error={:.16e}", r.std_error);
            if let Some(b) = r.thm1_bound {
                println!("bound={b:.16e}");
            }
        }
        Command::Bound { config } => {
            let spec = load_config(&config)?;
            println!("{:.16e}", bound_report(&spec.scenario)?);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        return 3;
    }
    match e {
        Error::Config { .. }
        | Error::InvalidParameter(_)
        | Error::DimensionMismatch(_)
        | Error::TooManyDevices(..) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
