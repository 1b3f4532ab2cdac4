use std::path::PathBuf;
use std::process::ExitCode;

use aer::config::{ExperimentConfig, OUTPUT_ROOT_ENV};
use aer::{runner, Error, Result};
use clap::{Parser, Subcommand};

/// Continual learning under noisy labels: experiment runner.
#[derive(Parser)]
#[command(name = "aer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method over all seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds replacing the configured list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory, overriding the configured root and AER_OUTPUT_ROOT.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat the run for several insertion percentiles.
    SweepAlpha {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,25,50,60,75,90")]
        alphas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the component ablation table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &PathBuf, seeds: Option<Vec<u64>>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seeds {
        cfg.run.seeds = s;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Run { config, seeds, out } => {
            let cfg = load(&config, seeds)?;
            let out = out.unwrap_or_else(|| cfg.output_dir());
            runner::run_command(&cfg, &out)?;
            Ok(out)
        }
        Command::SweepAlpha { config, alphas, out } => {
            let cfg = load(&config, None)?;
            let out = out.unwrap_or_else(|| cfg.output_dir());
            runner::sweep_alpha(&cfg, &alphas, &out)?;
            Ok(out)
        }
        Command::Ablate { config, out } => {
            let cfg = load(&config, None)?;
            let out = out.unwrap_or_else(|| cfg.output_dir());
            runner::ablate(&cfg, &out)?;
            Ok(out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(out) => {
            println!("results written to {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(&e, Error::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound) {
                eprintln!("(output root can be redirected with {OUTPUT_ROOT_ENV})");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
