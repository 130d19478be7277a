//! `hrl`: dataset generation, training, cross-validation, ablations, and
//! exports for the hybrid volumetric classifier.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, bad config, bad
//! values), 2 runtime failure (I/O, training errors).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "hrl", version, about = "hybrid CNN + Transformer-fusion volumetric classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the model variant: full, h-only, d-only.
    #[arg(long)]
    variant: Option<String>,
    /// Override the training strategy: two-stage, scratch, joint.
    #[arg(long)]
    strategy: Option<String>,
    /// Keep only these ROI ids (comma separated), zeroing the rest.
    #[arg(long)]
    mask_rois: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled dataset and write it to disk.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train one model on the whole dataset and save a checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Stratified k-fold cross-validation with per-fold checkpoints.
    Crossval {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Model checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train on the source dataset, test on the target dataset.
    Transfer {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Export the handcrafted feature matrix as CSV.
    ExtractFeatures {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Export mid-slice graymaps of a residual stage's feature maps.
    ExportMaps {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Subject id from the dataset manifest.
        #[arg(long)]
        subject: String,
        /// Residual stage (1..=4).
        #[arg(long)]
        stage: usize,
    },
    /// Run the finite-difference gradient suite over every registered op.
    Gradcheck {
        /// Also run the deliberately corrupted fixture (must fail).
        #[arg(long)]
        inject_fault: bool,
    },
}

fn load_config(common: &CommonArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(variant) = &common.variant {
        let _: hrl_core::encoder::Variant = variant.parse()?; // validate early
        cfg.model.variant = variant.clone();
    }
    if let Some(strategy) = &common.strategy {
        hrl_core::train::StrategyRegistry::<f32>::standard().get(strategy)?;
        cfg.train.strategy = strategy.clone();
    }
    if let Some(mask) = &common.mask_rois {
        let ids: Result<Vec<u16>, _> = mask
            .split(',')
            .map(|s| s.trim().parse::<u16>())
            .collect();
        cfg.pipeline.mask_rois = Some(ids.map_err(|_| {
            anyhow::anyhow!("--mask-rois expects comma-separated ROI ids, got '{mask}'")
        })?);
    }
    Ok(cfg)
}

/// Validation errors (bad input) exit 1; runtime failures exit 2.
fn classify_error(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<hrl_core::Error>() {
            return match core {
                hrl_core::Error::Config(_)
                | hrl_core::Error::InvalidArgument { .. }
                | hrl_core::Error::ShapeMismatch { .. } => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 1;
        }
    }
    let text = err.to_string();
    if text.contains("config") || text.contains("needs") || text.contains("expects") {
        1
    } else {
        2
    }
}

fn run() -> anyhow::Result<i32> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprintln!("{e}");
            return Ok(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return Ok(0);
        }
    };
    match cli.command {
        Command::Generate { common } => {
            commands::cmd_generate(&load_config(&common)?, &common.out)?;
        }
        Command::Train { common } => {
            commands::cmd_train(&load_config(&common)?, &common.out)?;
        }
        Command::Crossval { common } => {
            commands::cmd_crossval(&load_config(&common)?, &common.out)?;
        }
        Command::Eval { common, checkpoint } => {
            commands::cmd_eval(&load_config(&common)?, &checkpoint, &common.out)?;
        }
        Command::Transfer { common } => {
            commands::cmd_transfer(&load_config(&common)?, &common.out)?;
        }
        Command::ExtractFeatures { common } => {
            commands::cmd_extract_features(&load_config(&common)?, &common.out)?;
        }
        Command::ExportMaps {
            common,
            checkpoint,
            subject,
            stage,
        } => {
            commands::cmd_export_maps(&load_config(&common)?, &checkpoint, &subject, stage, &common.out)?;
        }
        Command::Gradcheck { inject_fault } => {
            return commands::cmd_gradcheck(inject_fault);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify_error(&err))
        }
    }
}
