use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use polaris::cli::{Command, Context, ExperimentConfig};
use polaris::Error;

/// DDIM inversion sweeps with dynamic guidance scales over analytic models.
#[derive(Debug, Parser)]
#[command(name = "polaris", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML experiment config; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Also write SVG charts.
    #[arg(long, global = true)]
    svg: bool,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// POLARIS vs the fixed-scale baseline over the step grid.
    Roundtrip,
    /// Sweep of the initial scale.
    #[command(name = "ablate-omega0")]
    AblateOmega0,
    /// POLARIS vs uniformly random scales.
    RandomOmega,
    /// Forward, reverse, cosine and fixed scale schedules.
    Schedulers,
    /// Perturbation studies of the exact and robust rules.
    Theorems,
    /// Linear restoration tasks.
    Restore,
    /// Field-space invariance checks.
    Invariance {
        /// Spaces to compare (noise, score, velocity); overrides `invariance.spaces`.
        #[arg(long, value_delimiter = ',')]
        space: Vec<String>,
    },
}

fn run(cli: Cli) -> polaris::Result<polaris::cli::Report> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = cli.out {
        config.out = out;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let command = match cli.command {
        Cmd::Roundtrip => Command::Roundtrip,
        Cmd::AblateOmega0 => Command::AblateOmega0,
        Cmd::RandomOmega => Command::RandomOmega,
        Cmd::Schedulers => Command::Schedulers,
        Cmd::Theorems => Command::Theorems,
        Cmd::Restore => Command::Restore,
        Cmd::Invariance { space } => {
            if !space.is_empty() {
                config.invariance.spaces = space;
            }
            Command::Invariance
        }
    };
    if cli.workers == Some(0) {
        return Err(polaris::Error::Config {
            key: "--workers".into(),
            msg: "must be at least 1".into(),
        });
    }
    let ctx = Context::new(config, cli.svg)?;
    polaris::parallel::with_workers(cli.workers, || command.run(&ctx))?
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            for f in &report.files {
                println!("{}", f.display());
            }
            if report.diverged.is_empty() {
                ExitCode::SUCCESS
            } else {
                for d in &report.diverged {
                    eprintln!("diverged: {d}");
                }
                ExitCode::from(3)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config { .. } => 2,
                Error::Divergence(_) => 3,
                _ => 1,
            })
        }
    }
}
