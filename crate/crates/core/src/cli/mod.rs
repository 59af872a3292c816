//! Command-line front end. Every command builds an [`ExperimentConfig`]
//! from defaults, an optional `--config` file and flags, validates it, and
//! only then starts work.

mod commands;
mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

pub use commands::{
    ablate_batch, ablate_fraction, eval, export_embeddings, fine_tune, gen_data, label_subset, load_data, pretrain,
    resolve_manifest, train_sl, write_report, Ablation, BatchRow, FractionRow, GeneratedDomain, Method, RunOutput,
    ABLATE_BATCH_HEADER, ABLATE_FRACTION_HEADER,
};
pub use config::{ExperimentConfig, KEYS};

use crate::training::{load_checkpoint, COLLAPSE_STD};

#[derive(Parser, Debug)]
#[command(name = "cmr-ssl", version, about = "Self-supervised ViT pretraining for MR sequence classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run seed; every command is deterministic given its arguments.
    #[arg(long)]
    pub seed: Option<u64>,
    /// File of `key=value` lines (`#` starts a comment) applied over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Extra `key=value` override applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Manifest CSV, or a `gen-data` directory combined with `--domain`.
    #[arg(long)]
    pub data: PathBuf,
    /// internal | external_A | external_B
    #[arg(long)]
    pub domain: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic internal and external datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        images_per_patient: Option<usize>,
        #[arg(long)]
        external_patients: Option<usize>,
    },
    /// Self-supervised pretraining on the training split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// simsiam | nt_xent
        #[arg(long)]
        objective: Option<String>,
    },
    /// Supervised fine-tuning of a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        fraction: Option<f64>,
        /// Train only the classification head.
        #[arg(long)]
        head_only: bool,
    },
    /// Supervised training from random initialisation.
    TrainSl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Per-label and mean ROC-AUC of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// Comma-separated subset such as `T1,T2`.
        #[arg(long)]
        labels: Option<String>,
    },
    /// Pretraining batch-size grid, each run fine-tuned and evaluated.
    AblateBatch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        batch_sizes: Option<String>,
        #[arg(long)]
        scp_epochs: Option<usize>,
        #[arg(long)]
        ft_epochs: Option<usize>,
    },
    /// Labelled-fraction grid for SCP+FT against supervised training.
    AblateFraction {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        fractions: Option<String>,
        /// Comma-separated fine-tuning epoch counts.
        #[arg(long)]
        ft_epochs: Option<String>,
        #[arg(long)]
        scp_epochs: Option<usize>,
    },
    /// Encoder outputs of one split as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<String>,
    },
}

fn build_config(common: &Common, flags: &[(&str, Option<String>)]) -> anyhow::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    if let Some(path) = &common.config {
        config.apply_file(path)?;
    }
    for entry in &common.set {
        let (key, value) = entry
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{entry}`"))?;
        config.set(key.trim(), value)?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            config.set(key, v)?;
        }
    }
    config.finalize()?;
    Ok(config)
}

fn some<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn auc_line(auc: Option<f64>) -> String {
    auc.map_or_else(|| "undefined".into(), |a| a.to_string())
}

fn print_run(out: &mut impl Write, run: &RunOutput) -> anyhow::Result<()> {
    writeln!(out, "checkpoint={}", run.checkpoint.display())?;
    writeln!(out, "report={}", run.report_path.display())?;
    if let Some(loss) = run.report.losses.last() {
        writeln!(out, "final_loss={loss}")?;
    }
    writeln!(out, "wall_seconds={:.3}", run.report.wall_seconds)?;
    Ok(())
}

fn finish_ablation<R>(out: &mut impl Write, csv: &Path, result: Ablation<R>) -> anyhow::Result<()> {
    writeln!(out, "csv={}", csv.display())?;
    match result.failure {
        None => {
            writeln!(out, "status=complete")?;
            Ok(())
        }
        Some(e) => {
            writeln!(out, "status=partial rows={}", result.rows.len())?;
            Err(e.into())
        }
    }
}

/// Runs one command, writing `key=value` result lines to `out`.
pub fn run(cli: Cli, out: &mut impl Write) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            common,
            patients,
            images_per_patient,
            external_patients,
        } => {
            let config = build_config(
                &common,
                &[
                    ("patients", some(&patients)),
                    ("images_per_patient", some(&images_per_patient)),
                    ("external_patients", some(&external_patients)),
                ],
            )?;
            for d in gen_data(&config, &common.out)? {
                writeln!(
                    out,
                    "{} samples={} train={} val={} test={} manifest={}",
                    d.domain,
                    d.samples,
                    d.patients[0],
                    d.patients[1],
                    d.patients[2],
                    d.manifest_path.display()
                )?;
            }
        }
        Command::Pretrain {
            common,
            data,
            epochs,
            batch_size,
            objective,
        } => {
            let config = build_config(
                &common,
                &[
                    ("domain", data.domain.clone()),
                    ("scp_epochs", some(&epochs)),
                    ("scp_batch_size", some(&batch_size)),
                    ("objective", objective),
                ],
            )?;
            let manifest = load_data(&config, &data.data)?;
            let run = pretrain(&config, &manifest, &common.out)?;
            print_run(out, &run)?;
            let std = run.report.final_embed_std().unwrap_or(0.0);
            writeln!(out, "embed_std={std}")?;
            writeln!(out, "collapsed={}", std <= COLLAPSE_STD)?;
        }
        Command::Finetune {
            common,
            data,
            checkpoint,
            epochs,
            fraction,
            head_only,
        } => {
            let config = build_config(
                &common,
                &[
                    ("domain", data.domain.clone()),
                    ("ft_epochs", some(&epochs)),
                    ("fraction", some(&fraction)),
                    ("head_only", head_only.then(|| "true".to_string())),
                ],
            )?;
            let manifest = load_data(&config, &data.data)?;
            let pretrained = load_checkpoint(&checkpoint)?;
            let run = fine_tune(&config, &pretrained, &manifest, &common.out)?;
            print_run(out, &run)?;
            writeln!(out, "split=val")?;
            writeln!(out, "mean_auc={}", auc_line(run.report.val_auc.as_ref().map(|a| a.mean)))?;
        }
        Command::TrainSl {
            common,
            data,
            epochs,
            fraction,
        } => {
            let config = build_config(
                &common,
                &[
                    ("domain", data.domain.clone()),
                    ("ft_epochs", some(&epochs)),
                    ("fraction", some(&fraction)),
                ],
            )?;
            let manifest = load_data(&config, &data.data)?;
            let run = train_sl(&config, &manifest, &common.out)?;
            print_run(out, &run)?;
            writeln!(out, "split=val")?;
            writeln!(out, "mean_auc={}", auc_line(run.report.val_auc.as_ref().map(|a| a.mean)))?;
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            split,
            labels,
        } => {
            let config = build_config(
                &common,
                &[("domain", data.domain.clone()), ("split", split), ("labels", labels)],
            )?;
            let manifest = load_data(&config, &data.data)?;
            let model = load_checkpoint(&checkpoint)?;
            let auc = eval(&config, &model, &manifest)?;
            writeln!(out, "split={}", config.split)?;
            for (label, value) in &auc.per_label {
                writeln!(out, "auc_{label}={}", auc_line(*value))?;
            }
            writeln!(out, "mean_auc={}", auc.mean)?;
        }
        Command::AblateBatch {
            common,
            data,
            batch_sizes,
            scp_epochs,
            ft_epochs,
        } => {
            let config = build_config(
                &common,
                &[
                    ("domain", data.domain.clone()),
                    ("batch_sizes", batch_sizes),
                    ("scp_epochs", some(&scp_epochs)),
                    ("ft_epochs", some(&ft_epochs)),
                ],
            )?;
            let manifest = load_data(&config, &data.data)?;
            std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
            let csv = common.out.join("ablate_batch.csv");
            let result = ablate_batch(&config, &manifest, &csv)?;
            for r in &result.rows {
                writeln!(
                    out,
                    "batch_size={} mean_auc={} wall_seconds={:.3} embed_std={}",
                    r.batch_size, r.mean_auc, r.wall_seconds, r.embed_std
                )?;
            }
            return finish_ablation(out, &csv, result);
        }
        Command::AblateFraction {
            common,
            data,
            fractions,
            ft_epochs,
            scp_epochs,
        } => {
            let config = build_config(
                &common,
                &[
                    ("domain", data.domain.clone()),
                    ("fractions", fractions),
                    ("ft_epochs_list", ft_epochs),
                    ("scp_epochs", some(&scp_epochs)),
                ],
            )?;
            let manifest = load_data(&config, &data.data)?;
            std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
            let csv = common.out.join("ablate_fraction.csv");
            let result = ablate_fraction(&config, &manifest, &csv)?;
            for r in &result.rows {
                writeln!(
                    out,
                    "method={} fraction={} ft_epochs={} mean_auc={}",
                    r.method.as_str(),
                    r.fraction,
                    r.ft_epochs,
                    r.mean_auc
                )?;
            }
            return finish_ablation(out, &csv, result);
        }
        Command::ExportEmbeddings {
            common,
            data,
            checkpoint,
            split,
        } => {
            let config = build_config(&common, &[("domain", data.domain.clone()), ("split", split)])?;
            let manifest = load_data(&config, &data.data)?;
            let model = load_checkpoint(&checkpoint)?;
            std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
            let csv = common.out.join("embeddings.csv");
            let rows = export_embeddings(&model, &manifest, config.split, &csv)?;
            writeln!(out, "rows={rows}")?;
            writeln!(out, "csv={}", csv.display())?;
        }
    }
    writeln!(out, "status=complete")?;
    Ok(())
}
