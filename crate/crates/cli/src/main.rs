use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use opsurv_cli::experiments;
use opsurv_cli::{CliError, ExperimentConfig, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "opsurv", version, about = "Conditional survival with time-varying covariates via operator networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a cumulative-effect dataset as CSV with a truth sidecar
    Simulate(Common),
    /// Fit one method and save the model
    Train(Common),
    /// Survival curves from a saved model
    Predict(Common),
    /// Integrated Brier score of a saved model
    Evaluate(Common),
    /// k-fold cross-validated integrated Brier scores for every method
    Cv(Common),
    /// Hyperparameter grid search scored on an independent test sample
    Tune(Common),
    /// Repeated simulation runs with curve bands and errors against the truth
    Replicate(Common),
    /// Treatment on/off curve pairs for the fixed covariate sets
    Contrast(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set hyper.nodes=64`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    replications: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.method {
            cfg.method = v.clone();
        }
        if let Some(v) = &self.data {
            cfg.data = Some(v.clone());
        }
        if let Some(v) = &self.model {
            cfg.model = Some(v.clone());
        }
        if let Some(v) = self.replications {
            cfg.replications = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => experiments::simulate(&c.resolve()?),
        Command::Train(c) => experiments::train_model(&c.resolve()?),
        Command::Predict(c) => experiments::predict(&c.resolve()?),
        Command::Evaluate(c) => experiments::evaluate(&c.resolve()?),
        Command::Cv(c) => experiments::cv(&c.resolve()?).map(drop),
        Command::Tune(c) => experiments::tune(&c.resolve()?),
        Command::Replicate(c) => experiments::replicate(&c.resolve()?).map(drop),
        Command::Contrast(c) => experiments::contrast(&c.resolve()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            let code: CliError = e;
            ExitCode::from(code.exit_code() as u8)
        }
    }
}
