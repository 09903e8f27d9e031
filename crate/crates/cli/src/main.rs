//! `fusionseg` — corpus generation, training, inference, evaluation, and
//! ablations for the camera-radar fusion segmentation pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or file-format
//! error, 4 numerical divergence, 1 anything else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fusionseg_core::losses::ClassSubset;
use fusionseg_core::pipeline::{AblationKind, FusionVariant};
use fusionseg_core::synth::Split;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "fusionseg", version, about = "camera-radar fusion segmentation over a synthetic water-scene corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Plain-text configuration file ([section] + key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key: --set section.key=value (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for spec in &self.overrides {
            cfg.apply_override(spec)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus on disk.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exclude the `none` corruption mode so every scene is adverse.
        #[arg(long)]
        adverse_only: bool,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the stage-1 fusion model or the stage-3 dual-encoder model.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// 1 (fusion / camera-only) or 3 (dual-encoder over inpainted images).
        #[arg(long)]
        stage: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stage 1 only: `on` for camera+radar fusion, `off` for camera-only.
        #[arg(long, default_value = "on")]
        radar: String,
        /// Stage 3 only: frozen stage-1 checkpoint.
        #[arg(long)]
        stage1_ckpt: Option<PathBuf>,
        /// Stage 3 only: addition | gated | concatenation.
        #[arg(long, default_value = "concatenation")]
        variant: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write predicted mask stacks for a split.
    Infer {
        #[arg(long)]
        corpus: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Adding a stage-3 checkpoint switches to full three-stage inference.
        #[arg(long)]
        stage3_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// train | val | test (default from config [eval].split).
        #[arg(long)]
        split: Option<String>,
        /// Persist the inpainted companion images for inspection.
        #[arg(long)]
        save_inpainted: bool,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate predictions (or `gt` itself) against ground truth.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        /// Prediction directory from `infer` (the `pred/` folder), or the
        /// literal `gt` for a ground-truth self-check.
        #[arg(long)]
        pred: String,
        #[arg(long)]
        split: Option<String>,
        /// all | targets | drivable.
        #[arg(long)]
        subset: Option<String>,
        /// Also write eval.txt / eval.records here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run an ablation study: sampling | fusion-variant | no-inpaint-fusion | stages.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kind: String,
        /// Comma-separated seeds, e.g. 1,2,3.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen {
            out,
            count,
            seed,
            adverse_only,
            force,
            config,
        } => {
            let cfg = config.resolve()?;
            commands::cmd_gen(&cfg, &out, count, seed, adverse_only, force)?;
        }
        Command::Train {
            corpus,
            out,
            stage,
            seed,
            radar,
            stage1_ckpt,
            variant,
            workers,
            config,
        } => {
            let cfg = config.resolve()?;
            match stage {
                1 => {
                    let radar = match radar.as_str() {
                        "on" => true,
                        "off" => false,
                        other => anyhow::bail!("--radar must be on|off, got `{other}`"),
                    };
                    commands::cmd_train_stage1(&cfg, &corpus, &out, seed, radar)?;
                }
                3 => {
                    let stage1_ckpt = stage1_ckpt
                        .ok_or_else(|| anyhow::anyhow!("--stage 3 requires --stage1-ckpt"))?;
                    let variant = FusionVariant::parse(&variant)?;
                    commands::cmd_train_stage3(
                        &cfg, &corpus, &out, seed, &stage1_ckpt, variant, workers,
                    )?;
                }
                other => anyhow::bail!("--stage must be 1 or 3, got {other}"),
            }
        }
        Command::Infer {
            corpus,
            ckpt,
            stage3_ckpt,
            out,
            split,
            save_inpainted,
            workers,
            config,
        } => {
            let cfg = config.resolve()?;
            let split = Split::parse(split.as_deref().unwrap_or(&cfg.split))?;
            let workers = workers.unwrap_or(cfg.workers);
            commands::cmd_infer(
                &cfg,
                &corpus,
                &ckpt,
                stage3_ckpt.as_deref(),
                &out,
                split,
                save_inpainted,
                workers,
            )?;
        }
        Command::Eval {
            corpus,
            pred,
            split,
            subset,
            out,
            workers,
            config,
        } => {
            let cfg = config.resolve()?;
            let split = Split::parse(split.as_deref().unwrap_or(&cfg.split))?;
            let subset = ClassSubset::parse(subset.as_deref().unwrap_or(&cfg.subset))?;
            let workers = workers.unwrap_or(cfg.workers);
            commands::cmd_eval(&cfg, &corpus, &pred, split, subset, out.as_deref(), workers)?;
        }
        Command::Ablate {
            corpus,
            out,
            kind,
            seeds,
            workers,
            config,
        } => {
            let cfg = config.resolve()?;
            let kind = AblationKind::parse(&kind)?;
            let mut seed_list = Vec::new();
            for s in seeds.split(',') {
                seed_list.push(
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| anyhow::anyhow!("bad seed `{s}` in --seeds"))?,
                );
            }
            commands::cmd_ablate(&cfg, &corpus, &out, kind, &seed_list, workers)?;
        }
    }
    Ok(())
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if let Some(core) = err.downcast_ref::<fusionseg_core::Error>() {
        use fusionseg_core::Error::*;
        match core {
            Divergence { .. } | NonFinite { .. } => 4,
            Io { .. } | Format { .. } => 3,
            InvalidConfig { .. } | MissingPrompt(_) => 2,
            _ => 1,
        }
    } else {
        // clap handles its own usage errors (exit 2) before we get here
        1
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
