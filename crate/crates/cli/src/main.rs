//! `survgrid`: synthetic cohorts, model training, landmarked prediction,
//! scoring, and cross-validation over longitudinal competing-risk data.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use env_logger::Env;

use crate::config::Settings;

#[derive(Parser)]
#[command(name = "survgrid", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand takes: a config file, inline overrides, and a
/// seed shortcut. Precedence is defaults < config file < --set < --seed.
#[derive(Args)]
struct Shared {
    /// Config file of KEY=VALUE lines (# comments allowed)
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set lr=0.001 (repeatable)
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Seed for generation, splits, and initialization
    #[arg(long)]
    seed: Option<u64>,
}

impl Shared {
    fn settings(&self) -> Result<Settings> {
        let mut settings = Settings::load(self.config.as_deref())?;
        settings.apply_overrides(&self.set)?;
        if let Some(seed) = self.seed {
            settings.set("seed", &seed.to_string())?;
        }
        Ok(settings)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic competing-risk cohort into a dataset directory
    Synth {
        #[command(flatten)]
        shared: Shared,
        /// Dataset directory to create
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory
    Train {
        #[command(flatten)]
        shared: Shared,
        /// Dataset directory (from `synth` or hand-assembled)
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint.txt and training_log.csv
        #[arg(long)]
        out: PathBuf,
        /// Collapse factorized attention into a single flattened encoder
        #[arg(long)]
        no_fa: bool,
        /// Disable staleness decay on carried-forward values
        #[arg(long)]
        no_cet: bool,
        /// Prediction horizon in intervals
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Predict hazard grids from a checkpoint at a fixed landmark
    Predict {
        #[command(flatten)]
        shared: Shared,
        /// Dataset directory to predict on
        #[arg(long)]
        data: PathBuf,
        /// Trained checkpoint file
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for predictions.csv
        #[arg(long)]
        out: PathBuf,
        /// Landmark interval: predict for subjects still at risk here
        #[arg(long)]
        tau: Option<usize>,
        /// Also write batch-averaged attention maps to attention.csv
        #[arg(long)]
        attention: bool,
    },
    /// Score a predictions file against a dataset's outcomes
    Evaluate {
        #[command(flatten)]
        shared: Shared,
        /// predictions.csv from `predict`
        #[arg(long)]
        predictions: PathBuf,
        /// Dataset directory holding the outcomes
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics.csv and calibration tables
        #[arg(long)]
        out: PathBuf,
        /// Landmark interval the predictions were made at
        #[arg(long)]
        tau: Option<usize>,
        /// Calibration bin count
        #[arg(long)]
        bins: Option<usize>,
    },
    /// K-fold cross-validation: train, predict, and score per fold
    Crossval {
        #[command(flatten)]
        shared: Shared,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Output directory for fold_<i>/ artifacts and summary.csv
        #[arg(long)]
        out: PathBuf,
        /// Number of folds
        #[arg(long)]
        folds: Option<usize>,
        /// Collapse factorized attention into a single flattened encoder
        #[arg(long)]
        no_fa: bool,
        /// Disable staleness decay on carried-forward values
        #[arg(long)]
        no_cet: bool,
        /// Prediction horizon in intervals
        #[arg(long)]
        horizon: Option<usize>,
        /// Landmark interval for held-out predictions
        #[arg(long)]
        tau: Option<usize>,
        /// Calibration bin count
        #[arg(long)]
        bins: Option<usize>,
    },
}

fn set_flag(settings: &mut Settings, key: &str, on: bool) -> Result<()> {
    if on {
        settings.set(key, "0")?;
    }
    Ok(())
}

fn set_opt(settings: &mut Settings, key: &str, value: Option<usize>) -> Result<()> {
    if let Some(v) = value {
        settings.set(key, &v.to_string())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { shared, out } => {
            let settings = shared.settings()?;
            pipeline::cmd_synth(&settings, &out)
        }
        Command::Train { shared, data, out, no_fa, no_cet, horizon } => {
            let mut settings = shared.settings()?;
            set_flag(&mut settings, "factorized", no_fa)?;
            set_flag(&mut settings, "time_decay", no_cet)?;
            set_opt(&mut settings, "horizon", horizon)?;
            pipeline::cmd_train(&settings, &data, &out)
        }
        Command::Predict { shared, data, checkpoint, out, tau, attention } => {
            let mut settings = shared.settings()?;
            set_opt(&mut settings, "tau", tau)?;
            pipeline::cmd_predict(&settings, &data, &checkpoint, &out, attention)
        }
        Command::Evaluate { shared, predictions, data, out, tau, bins } => {
            let mut settings = shared.settings()?;
            set_opt(&mut settings, "tau", tau)?;
            set_opt(&mut settings, "bins", bins)?;
            pipeline::cmd_evaluate(&settings, &predictions, &data, &out)
        }
        Command::Crossval {
            shared,
            data,
            out,
            folds,
            no_fa,
            no_cet,
            horizon,
            tau,
            bins,
        } => {
            let mut settings = shared.settings()?;
            set_flag(&mut settings, "factorized", no_fa)?;
            set_flag(&mut settings, "time_decay", no_cet)?;
            set_opt(&mut settings, "horizon", horizon)?;
            set_opt(&mut settings, "folds", folds)?;
            set_opt(&mut settings, "tau", tau)?;
            set_opt(&mut settings, "bins", bins)?;
            pipeline::cmd_crossval(&settings, &data, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(Env::new().filter_or("SURVGRID_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
