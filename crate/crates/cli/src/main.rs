use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use plfuse::config::PipelineConfig;
use plfuse::pipeline::ablation_table;
use plfuse::workflow::{self, PREDICTION_SUFFIX};

#[derive(Parser)]
#[command(name = "plfuse", version, about = "Multi-source soft pseudo-label fusion")]
struct Cli {
    /// Pipeline config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario with source predictions.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score every source on every image of a split.
    Gap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse source predictions into soft pseudo-labels.
    Fuse {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        gap: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write labels kept only where all sources agree.
        #[arg(long)]
        unanimity: bool,
    },
    /// Train the per-pixel model on fused labels.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class IoU of prediction files against ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// File name suffix of the prediction files.
        #[arg(long, default_value = PREDICTION_SUFFIX)]
        suffix: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Similarity weighting x label-entropy weighting grid.
    Ablate {
        /// Number of seeds, starting at the config seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    Ok(PipelineConfig::load_or_default(path)?)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth { out, seed } => {
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let m = workflow::synth(&cfg, &out)?;
            println!(
                "wrote {} train and {} test scenes with {} sources to {}",
                m.train.len(),
                m.test.len(),
                m.sources.len(),
                out.display()
            );
        }
        Command::Gap { data, split, out } => {
            let report = workflow::gap(&cfg, &data, &split, &out)?;
            println!("scored {} images, wrote {}", report.len(), out.display());
        }
        Command::Fuse {
            data,
            gap,
            out,
            unanimity,
        } => {
            let summary = workflow::fuse(&cfg, &data, &gap, &out, unanimity)?;
            println!("fused {} images into {}", summary.len(), out.display());
        }
        Command::Train { data, labels, out } => {
            let ckpt = workflow::train(&cfg, &data, &labels, &out)?;
            let log = workflow::read_train_log(&out)?;
            if let (Some(first), Some(last)) = (log.first(), log.last()) {
                println!(
                    "trained {} steps, loss {:.4} -> {:.4}, checkpoint in {}",
                    ckpt.step,
                    first.mean.all,
                    last.mean.all,
                    out.display()
                );
            } else {
                println!("no training steps run, checkpoint in {}", out.display());
            }
        }
        Command::Eval {
            data,
            pred,
            split,
            suffix,
            out,
        } => {
            let json = workflow::eval(&data, &pred, &split, &suffix, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&json)?);
        }
        Command::Ablate { seeds, out } => {
            anyhow::ensure!(seeds > 0, "--seeds must be at least 1");
            let list: Vec<u64> = (0..seeds).map(|k| cfg.seed + k).collect();
            let report = workflow::ablate(&cfg, &list, out.as_deref())
                .context("ablation failed")?;
            print!("{}", ablation_table(&report.rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
