//! `wrtsam` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use wrtsam::Execution;

use crate::commands::{parse_named_dir, usage, UsageError};
use crate::config::{CliConfig, Overrides};

#[derive(Parser)]
#[command(name = "wrtsam", version, about = "Weld radiograph defect segmentation with prompt-generator adapters")]
struct Cli {
    /// Structured TOML config with [model], [train], [pretrain], [scenario] and [ablation] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic weld radiograph dataset.
    Synth {
        /// Built-in scenario: scenario-a, scenario-b, scenario-c, wide-640, wide-1600.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone from scratch.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Freeze the backbone and train adapters and prompt generators.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation set as NAME=DIR; repeatable. Defaults to an 8:2 holdout split of --data.
        #[arg(long, value_parser = parse_named_dir)]
        eval: Vec<(String, PathBuf)>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a checkpoint, or a directory of probability maps, against a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of prediction PNGs named like the dataset images.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the five-row ablation table over several seeds.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_named_dir)]
        eval: Vec<(String, PathBuf)>,
        /// Subset of rows, comma separated.
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write binary masks for an image or a directory of images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth masks mirroring the input layout.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Also write probability maps.
        #[arg(long)]
        probabilities: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Finite-difference check of every backward rule and both prompt generators.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn configure(path: Option<&PathBuf>, overrides: &Overrides) -> Result<CliConfig> {
    let mut cfg = CliConfig::load(path.map(PathBuf::as_path)).map_err(|e| usage(format!("{e:#}")))?;
    overrides.apply(&mut cfg).map_err(|e| usage(format!("{e:#}")))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    let config = cli.config.as_ref();
    match cli.command {
        Command::Synth { preset, count, seed, out } => {
            let cfg = configure(config, &Overrides::default())?;
            commands::synth(&cfg, preset.as_deref(), count, seed, &out, exec)?;
        }
        Command::Pretrain { data, out, overrides } => commands::pretrain(&configure(config, &overrides)?, &data, &out, exec)?,
        Command::Adapt { checkpoint, data, eval, out, overrides } => {
            commands::adapt(&configure(config, &overrides)?, &checkpoint, &data, &eval, &out, exec)?
        }
        Command::Eval { checkpoint, predictions, data, out, overrides } => {
            commands::eval(&configure(config, &overrides)?, checkpoint.as_deref(), predictions.as_deref(), &data, &out, exec)?
        }
        Command::Ablate { checkpoint, data, eval, rows, seeds, out, overrides } => {
            commands::ablate(&configure(config, &overrides)?, &checkpoint, &data, &eval, rows.as_deref(), seeds.as_deref(), &out, exec)?
        }
        Command::Predict { checkpoint, input, masks, probabilities, out, overrides } => {
            commands::predict(&configure(config, &overrides)?, &checkpoint, &input, masks.as_deref(), probabilities, &out, exec)?
        }
        Command::Gradcheck { out, corrupt } => {
            if !commands::gradcheck(corrupt.as_deref(), out.as_deref(), exec)? {
                eprintln!("error: gradient check failed");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
