//! `tep`: generate data, train and evaluate multimodal default models,
//! and produce the attribution and attention reports.

mod commands;
mod config;
mod logging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use tep_core::data::Channel;
use tep_core::fusion::Regime;

use crate::commands::Outcome;
use crate::config::{reference_keys, ConfigError, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "tep", version, about = "Multi-horizon corporate default prediction with transformer channel models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config; every key is optional.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`, the root that receives `<command>/` folders.
    #[arg(long, env = "TEP_OUTPUT_ROOT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Overrides `data.dir`: read fundamental/market/pricing/labels CSVs from here.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV files.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Fit preprocessing on the training split and audit the assembled dataset.
    Prep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a multimodal model and score it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Overrides `training.regime` (r1, r2 or r3) and clears explicit stages.
        #[arg(long)]
        regime: Option<Regime>,
    },
    /// Score a saved checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint file; defaults to `<output_dir>/train/model.tepc`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Company-level stratified k-fold cross-validation.
    Cv {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Overrides `cv.k`.
        #[arg(long)]
        k: Option<usize>,
        /// Overrides `training.regime` and clears explicit stages.
        #[arg(long)]
        regime: Option<Regime>,
    },
    /// Pricing-only models over a grid of lookback windows.
    SweepWindow {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Overrides `sweep.windows`, comma separated trading days.
        #[arg(long, value_delimiter = ',')]
        windows: Option<Vec<usize>>,
    },
    /// Shapley attribution over channels, optionally over time steps.
    Shapley {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Sets `shapley.temporal`.
        #[arg(long)]
        temporal: bool,
    },
    /// Export attention heat maps of a checkpoint's transformer channel.
    Attention {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint file; defaults to `<output_dir>/train/model.tepc`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `attention.channel`.
        #[arg(long)]
        channel: Option<Channel>,
        /// Overrides `attention.horizon`.
        #[arg(long)]
        horizon: Option<usize>,
    },
}

const COMMON_KEYS: [&str; 2] = ["seed", "output_dir"];
const DATASET_KEYS: [&str; 3] = ["data", "windows", "channels"];
const TRAINING_KEYS: [&str; 4] = ["training.max_epochs", "training.batch_size", "training.eval_chunk", "training.optimizer"];

/// Config key prefixes read by each command.
fn consumed(command: &str) -> Vec<&'static str> {
    let mut keys: Vec<&str> = COMMON_KEYS.to_vec();
    match command {
        "gen" => keys.push("data.generator"),
        "prep" => keys.extend(DATASET_KEYS),
        "train" => keys.extend(DATASET_KEYS.into_iter().chain(["model", "training"])),
        "eval" => keys.extend(["data", "eval"]),
        "cv" => keys.extend(DATASET_KEYS.into_iter().chain(["model", "training", "cv"])),
        "sweep-window" => keys.extend(DATASET_KEYS.into_iter().chain(["model.hidden", "model.pricing", "sweep"]).chain(TRAINING_KEYS)),
        "shapley" => keys.extend(DATASET_KEYS.into_iter().chain(["model", "shapley"]).chain(TRAINING_KEYS)),
        "attention" => keys.extend(["data", "attention"]),
        _ => {}
    }
    keys
}

fn keys_help(command: &str) -> String {
    let prefixes = consumed(command);
    let matches = |k: &str| prefixes.iter().any(|p| k == *p || k.starts_with(&format!("{p}.")) || k.starts_with(&format!("{p} ")));
    let mut out = String::from("Config keys read by this command (default in brackets):\n");
    for (k, v) in reference_keys().into_iter().filter(|(k, _)| matches(k)) {
        out.push_str(&format!("  {k} [{v}]\n"));
    }
    out
}

fn resolve(common: &Common, data: Option<&DataArgs>) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(dir) = data.and_then(|d| d.data.clone()) {
        cfg.data.dir = Some(dir);
    }
    Ok(cfg)
}

fn set_regime(cfg: &mut ExperimentConfig, regime: Option<Regime>) {
    if let Some(r) = regime {
        cfg.training.regime = r;
        cfg.training.stages = None;
    }
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Gen { common } => {
            let cfg = checked(resolve(&common, None)?)?;
            commands::gen(&cfg)
        }
        Command::Prep { common, data } => commands::prep(&checked(resolve(&common, Some(&data))?)?),
        Command::Train { common, data, regime } => {
            let mut cfg = resolve(&common, Some(&data))?;
            set_regime(&mut cfg, regime);
            commands::train(&checked(cfg)?)
        }
        Command::Eval { common, data, checkpoint } => commands::eval(&checked(resolve(&common, Some(&data))?)?, checkpoint.as_deref()),
        Command::Cv { common, data, k, regime } => {
            let mut cfg = resolve(&common, Some(&data))?;
            set_regime(&mut cfg, regime);
            if let Some(k) = k {
                cfg.cv.k = k;
            }
            commands::cv(&checked(cfg)?)
        }
        Command::SweepWindow { common, data, windows } => {
            let mut cfg = resolve(&common, Some(&data))?;
            if let Some(w) = windows {
                cfg.sweep.windows = w;
            }
            commands::sweep_window(&checked(cfg)?)
        }
        Command::Shapley { common, data, temporal } => {
            let mut cfg = resolve(&common, Some(&data))?;
            cfg.shapley.temporal |= temporal;
            commands::shapley(&checked(cfg)?)
        }
        Command::Attention { common, data, checkpoint, channel, horizon } => {
            let mut cfg = resolve(&common, Some(&data))?;
            if let Some(c) = channel {
                cfg.attention.channel = c;
            }
            if let Some(h) = horizon {
                cfg.attention.horizon = h;
            }
            commands::attention(&checked(cfg)?, checkpoint.as_deref())
        }
    }
}

fn checked(cfg: ExperimentConfig) -> Result<ExperimentConfig, ConfigError> {
    cfg.validate()?;
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Gen { .. } => "gen",
        Command::Prep { .. } => "prep",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Cv { .. } => "cv",
        Command::SweepWindow { .. } => "sweep-window",
        Command::Shapley { .. } => "shapley",
        Command::Attention { .. } => "attention",
    }
}

fn main() -> ExitCode {
    let mut app = Cli::command();
    let names: Vec<String> = app.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let help = keys_help(&name);
        app = app.mut_subcommand(name, |c| c.after_long_help(help.clone()).after_help(help));
    }
    let cli = match Cli::from_arg_matches(&app.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let name = command_name(&cli.command);
    logging::init(name);
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
