//! Command-line front end for the pipeline: dataset generation, quantizer
//! pretraining, OCL training, evaluation, analysis, and mask plotting.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vvo_core::harness::{
    analyze_bias, analyze_objectness, analyze_p2, default_config, run_eval, run_gen_data,
    run_plot, run_pretrain, run_train, write_bias_svg, write_objectness_svg, write_p2_svg, Split,
    CONFIG_SCHEMA,
};
use vvo_core::tensorio::RunConfig;

#[derive(Parser)]
#[command(name = "vvo", version, about = "object-centric learning on synthetic sprite scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file with `key = value` lines; schema defaults fill the rest.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. `--set train.steps=100` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path, CONFIG_SCHEMA)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => default_config(),
        };
        for pair in &self.overrides {
            let Some((k, v)) = pair.split_once('=') else {
                bail!("override `{pair}` is not KEY=VALUE");
            };
            cfg.set(k.trim(), v.trim()).with_context(|| format!("applying `{pair}`"))?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sprite dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the quantizer against frozen encoder features.
    PretrainVq {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the aggregator and decoder against precomputed targets.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Quantizer checkpoint from `pretrain-vq` (quantized variants only).
        #[arg(long)]
        pretrain: Option<PathBuf>,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute segmentation metrics for a trained checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Trained checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Which samples to score: train | eval.
        #[arg(long, default_value = "eval")]
        split: String,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Dump predicted masks into this directory for `plot`.
        #[arg(long)]
        masks_out: Option<PathBuf>,
    },
    /// Run a probability-model analysis: p2 | bias | objectness.
    Analyze {
        #[arg(long)]
        which: String,
        /// Report output path (JSON).
        #[arg(long)]
        json: PathBuf,
        /// Optional chart output path (SVG).
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render image | truth | prediction panels from dumped masks.
    Plot {
        /// Mask directory written by `eval --masks-out`.
        #[arg(long)]
        masks: PathBuf,
        /// Directory for the PPM panels.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print every config key with its default and description.
    Config,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let data = run_gen_data(&cfg, &out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::PretrainVq { cfg, data, out } => {
            let cfg = cfg.load()?;
            let summary = run_pretrain(&cfg, &data, &out)?;
            if summary.quantized {
                println!(
                    "pretrained quantizer: recon_mse {:.6}, {} codes in use",
                    summary.final_recon_mse, summary.final_unique_codes
                );
            } else {
                println!("variant uses raw features; wrote empty checkpoint");
            }
        }
        Command::Train { cfg, data, pretrain, out } => {
            let cfg = cfg.load()?;
            let summary = run_train(&cfg, &data, pretrain.as_deref(), &out)?;
            println!(
                "trained: loss {:.6} -> {:.6}, frozen inputs unchanged: {}, parameters changed: {}",
                summary.first_loss,
                summary.final_loss,
                summary.frozen_inputs_unchanged,
                summary.trained_params_changed
            );
        }
        Command::Eval { cfg, data, ckpt, split, json, masks_out } => {
            let cfg = cfg.load()?;
            let split = Split::parse(&split)?;
            let report = run_eval(&cfg, &data, &ckpt, split, masks_out.as_deref())?;
            let text = serde_json::to_string(&report)?;
            println!("{text}");
            if let Some(path) = json {
                fs::write(&path, &text)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Analyze { which, json, svg, seed } => {
            let text = match which.as_str() {
                "p2" => {
                    let report = analyze_p2(seed);
                    if let Some(path) = &svg {
                        write_p2_svg(path, &report)?;
                    }
                    serde_json::to_string_pretty(&report)?
                }
                "bias" => {
                    let report = analyze_bias(seed);
                    if let Some(path) = &svg {
                        write_bias_svg(path, &report)?;
                    }
                    serde_json::to_string_pretty(&report)?
                }
                "objectness" => {
                    let report = analyze_objectness(seed);
                    if let Some(path) = &svg {
                        write_objectness_svg(path, &report)?;
                    }
                    serde_json::to_string_pretty(&report)?
                }
                other => bail!("unknown analysis `{other}` (expected p2 | bias | objectness)"),
            };
            fs::write(&json, &text).with_context(|| format!("writing {}", json.display()))?;
            println!("{text}");
        }
        Command::Plot { masks, out } => {
            let n = run_plot(&masks, &out)?;
            println!("wrote {n} panels to {}", out.display());
        }
        Command::Config => {
            for spec in CONFIG_SCHEMA {
                println!("{:<22} {:<12} {}", spec.name, spec.default, spec.doc);
            }
        }
    }
    Ok(())
}
