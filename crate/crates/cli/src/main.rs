//! Command-line driver for multivariate functional additive mixed models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use multifamm::coarsen::StopRule;
use multifamm::{Error, ErrorClass};

use crate::commands::CoarsenArgs;
use crate::config::{Loaded, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "multifamm",
    version,
    about = "Fit multivariate functional additive mixed models"
)]
struct Cli {
    /// Worker threads for per-dimension and per-replicate jobs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run both estimation steps and write fit, bands and variance table.
    Fit(ConfigArg),
    /// Run the covariance step only (means, eigenbases, variance table).
    Fpca(ConfigArg),
    /// Simulate datasets, refit and write a metric report.
    Simulate(ConfigArg),
    /// Coarsen densely sampled trajectories on a lead pair of dimensions.
    Coarsen(CoarsenCli),
    /// Inspect configuration.
    Config {
        /// Print the full default configuration.
        #[arg(long)]
        defaults: bool,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("stop").required(true).args(["rstar", "sstar", "target"])))]
struct CoarsenCli {
    #[arg(long)]
    input: PathBuf,
    /// Two comma-separated dimension names, e.g. `hand.x,hand.y`.
    #[arg(long, value_delimiter = ',', required = true)]
    lead_dims: Vec<String>,
    /// Relative cumulative-loss threshold.
    #[arg(long)]
    rstar: Option<f64>,
    /// Absolute cumulative-loss threshold.
    #[arg(long)]
    sstar: Option<f64>,
    /// Number of points to keep per curve.
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    output: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn run(cli: Cli) -> multifamm::Result<()> {
    match cli.command {
        Command::Config { defaults } => {
            if !defaults {
                return Err(Error::Config("nothing to do; pass --defaults".into()));
            }
            print!("{}", PipelineConfig::defaults_toml());
        }
        Command::Fit(a) => {
            let dir = commands::run_fit(&Loaded::read(&a.config)?)?;
            println!("fit written to {}", dir.display());
        }
        Command::Fpca(a) => {
            let dir = commands::run_fpca(&Loaded::read(&a.config)?)?;
            println!("step-1 results written to {}", dir.display());
        }
        Command::Simulate(a) => {
            let dir = commands::run_simulate(&Loaded::read(&a.config)?)?;
            println!("metric report written to {}", dir.display());
        }
        Command::Coarsen(c) => {
            if c.lead_dims.len() != 2 {
                return Err(Error::Config(format!(
                    "--lead-dims needs two names, got {}",
                    c.lead_dims.len()
                )));
            }
            let stop = match (c.rstar, c.sstar, c.target) {
                (Some(r), _, _) => StopRule::Relative(r),
                (_, Some(s), _) => StopRule::Absolute(s),
                (_, _, Some(n)) => StopRule::TargetSize(n),
                _ => unreachable!("clap enforces one stop rule"),
            };
            let args = CoarsenArgs {
                input: c.input,
                output: c.output,
                lead: [c.lead_dims[0].clone(), c.lead_dims[1].clone()],
                stop,
            };
            let (before, after) = commands::run_coarsen(&args)?;
            println!("kept {after} of {before} points");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
    {
        log::warn!("thread pool: {e}");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
