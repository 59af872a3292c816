use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::ExperimentConfig;
use crate::data::{generate_synthetic, load_manifest, patient_split, save_manifest, DatasetManifest, Domain, Split, DEFAULT_RATIOS};
use crate::error::{Error, Result};
use crate::labels::SequenceLabel;
use crate::metrics::LabelAuc;
use crate::training::{
    embed, evaluate, finetune, pretrain_scp, save_checkpoint, train_supervised, ModelCheckpoint,
    ScpConfig, SupervisedConfig, TrainReport,
};

pub const ABLATE_BATCH_HEADER: [&str; 3] = ["batch_size", "mean_auc", "wall_seconds"];
pub const ABLATE_FRACTION_HEADER: [&str; 4] = ["method", "fraction", "ft_epochs", "mean_auc"];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        what: "csv output",
        detail: format!("{}: {e}", path.display()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// A directory resolves to its `<domain>.csv` manifest; a file is used as is.
pub fn resolve_manifest(data: &Path, domain: Domain) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{}.csv", domain.as_str()))
    } else {
        data.to_path_buf()
    }
}

fn domain_of(manifest: &DatasetManifest) -> Result<Domain> {
    manifest
        .samples()
        .first()
        .map(|s| s.domain())
        .ok_or_else(|| Error::EmptyDataset("manifest has no samples".into()))
}

/// Labels scored for `manifest`: the configured subset or the domain's labels.
pub fn label_subset(config: &ExperimentConfig, manifest: &DatasetManifest) -> Result<Vec<SequenceLabel>> {
    match &config.labels {
        Some(l) => Ok(l.clone()),
        None => Ok(domain_of(manifest)?.labels().to_vec()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDomain {
    pub domain: Domain,
    pub manifest_path: PathBuf,
    pub samples: usize,
    /// Patients in train, val and test.
    pub patients: [usize; 3],
}

/// Writes internal and both external manifests, each split 70/10/20 by
/// patient, with their images under `out/images`.
pub fn gen_data(config: &ExperimentConfig, out: &Path) -> Result<Vec<GeneratedDomain>> {
    create_dir(out)?;
    let plan = [
        (Domain::Internal, config.patients),
        (Domain::ExternalA, config.external_patients),
        (Domain::ExternalB, config.external_patients),
    ];
    let mut generated = Vec::with_capacity(plan.len());
    for (domain, patients) in plan {
        let raw = generate_synthetic(patients, config.images_per_patient, domain, config.seed)?;
        let manifest = patient_split(&raw, DEFAULT_RATIOS, config.seed)?;
        let manifest_path = save_manifest(&manifest, out, domain.as_str())?;
        generated.push(GeneratedDomain {
            domain,
            manifest_path,
            samples: manifest.len(),
            patients: [Split::Train, Split::Val, Split::Test].map(|s| manifest.patients(s).len()),
        });
    }
    Ok(generated)
}

/// Per-epoch training curve as `epoch,loss[,embed_std]`.
pub fn write_report(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let with_std = !report.embed_std.is_empty();
    let header: &[&str] = if with_std {
        &["epoch", "loss", "embed_std"]
    } else {
        &["epoch", "loss"]
    };
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for (epoch, loss) in report.losses.iter().enumerate() {
        let mut row = vec![(epoch + 1).to_string(), loss.to_string()];
        if with_std {
            row.push(report.embed_std[epoch].to_string());
        }
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub checkpoint: PathBuf,
    pub report_path: PathBuf,
    pub report: TrainReport,
}

fn finish_run(out: &Path, stem: &str, ckpt: &ModelCheckpoint, report: TrainReport) -> Result<RunOutput> {
    create_dir(out)?;
    let checkpoint = out.join(format!("{stem}.ckpt"));
    save_checkpoint(ckpt, &checkpoint)?;
    let report_path = out.join(format!("{stem}_report.csv"));
    write_report(&report_path, &report)?;
    Ok(RunOutput {
        checkpoint,
        report_path,
        report,
    })
}

pub fn pretrain(config: &ExperimentConfig, manifest: &DatasetManifest, out: &Path) -> Result<RunOutput> {
    let (ckpt, report) = pretrain_scp(manifest, &config.scp)?;
    finish_run(out, "scp", &ckpt, report)
}

pub fn fine_tune(
    config: &ExperimentConfig,
    checkpoint: &ModelCheckpoint,
    manifest: &DatasetManifest,
    out: &Path,
) -> Result<RunOutput> {
    let (ckpt, report) = finetune(checkpoint, manifest, &config.supervised)?;
    finish_run(out, "ft", &ckpt, report)
}

pub fn train_sl(config: &ExperimentConfig, manifest: &DatasetManifest, out: &Path) -> Result<RunOutput> {
    let (ckpt, report) = train_supervised(manifest, &config.scp.vit, &config.supervised)?;
    finish_run(out, "sl", &ckpt, report)
}

pub fn eval(config: &ExperimentConfig, checkpoint: &ModelCheckpoint, manifest: &DatasetManifest) -> Result<LabelAuc> {
    evaluate(checkpoint, manifest, config.split, &label_subset(config, manifest)?)
}

/// Rows finished before a failure are kept alongside the error.
#[derive(Debug)]
pub struct Ablation<R> {
    pub rows: Vec<R>,
    pub failure: Option<Error>,
}

impl<R> Ablation<R> {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchRow {
    pub batch_size: usize,
    pub mean_auc: f64,
    pub wall_seconds: f64,
    /// Collapse monitor after the last pretraining epoch.
    pub embed_std: f64,
}

fn batch_run(config: &ExperimentConfig, manifest: &DatasetManifest, labels: &[SequenceLabel], batch_size: usize) -> Result<BatchRow> {
    let started = Instant::now();
    let scp = ScpConfig {
        batch_size,
        ..config.scp.clone()
    };
    let (ckpt, report) = pretrain_scp(manifest, &scp)?;
    let (ft, _) = finetune(&ckpt, manifest, &config.supervised)?;
    let auc = evaluate(&ft, manifest, Split::Test, labels)?;
    Ok(BatchRow {
        batch_size,
        mean_auc: auc.mean,
        wall_seconds: started.elapsed().as_secs_f64(),
        embed_std: report.final_embed_std().unwrap_or(0.0),
    })
}

/// SCP at every batch size in the grid, each followed by fine-tuning and
/// test evaluation with the same seed. Rows reach `csv_path` as they finish.
pub fn ablate_batch(config: &ExperimentConfig, manifest: &DatasetManifest, csv_path: &Path) -> Result<Ablation<BatchRow>> {
    let labels = label_subset(config, manifest)?;
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| csv_error(csv_path, e))?;
    w.write_record(ABLATE_BATCH_HEADER).map_err(|e| csv_error(csv_path, e))?;
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let mut out = Ablation {
        rows: Vec::new(),
        failure: None,
    };
    for &b in &config.batch_sizes {
        match batch_run(config, manifest, &labels, b) {
            Ok(row) => {
                w.write_record([row.batch_size.to_string(), row.mean_auc.to_string(), format!("{:.3}", row.wall_seconds)])
                    .map_err(|e| csv_error(csv_path, e))?;
                w.flush().map_err(|e| Error::io(csv_path, e))?;
                out.rows.push(row);
            }
            Err(e) => {
                out.failure = Some(e);
                break;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    ScpFt,
    Sl,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::ScpFt => "scp_ft",
            Method::Sl => "sl",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FractionRow {
    pub method: Method,
    pub fraction: f64,
    pub ft_epochs: usize,
    pub mean_auc: f64,
}

/// One SCP checkpoint on the full training split, fine-tuned on each
/// (fraction, epochs) cell, followed by supervised-from-scratch runs on the
/// same cells.
pub fn ablate_fraction(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    csv_path: &Path,
) -> Result<Ablation<FractionRow>> {
    let labels = label_subset(config, manifest)?;
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| csv_error(csv_path, e))?;
    w.write_record(ABLATE_FRACTION_HEADER).map_err(|e| csv_error(csv_path, e))?;
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let mut out = Ablation {
        rows: Vec::new(),
        failure: None,
    };
    let scp = match pretrain_scp(manifest, &config.scp) {
        Ok((ckpt, _)) => ckpt,
        Err(e) => {
            out.failure = Some(e);
            return Ok(out);
        }
    };
    let cells: Vec<(Method, f64, usize)> = [Method::ScpFt, Method::Sl]
        .into_iter()
        .flat_map(|m| {
            config
                .fractions
                .iter()
                .flat_map(move |&f| config.ft_epochs_list.iter().map(move |&e| (m, f, e)))
        })
        .collect();
    for (method, fraction, epochs) in cells {
        let sup = SupervisedConfig {
            fraction,
            epochs,
            ..config.supervised.clone()
        };
        let trained = match method {
            Method::ScpFt => finetune(&scp, manifest, &sup),
            Method::Sl => train_supervised(manifest, &config.scp.vit, &sup),
        };
        let auc = trained.and_then(|(ckpt, _)| evaluate(&ckpt, manifest, Split::Test, &labels));
        match auc {
            Ok(auc) => {
                let row = FractionRow {
                    method,
                    fraction,
                    ft_epochs: epochs,
                    mean_auc: auc.mean,
                };
                w.write_record([
                    method.as_str().to_string(),
                    fraction.to_string(),
                    epochs.to_string(),
                    auc.mean.to_string(),
                ])
                .map_err(|e| csv_error(csv_path, e))?;
                w.flush().map_err(|e| Error::io(csv_path, e))?;
                out.rows.push(row);
            }
            Err(e) => {
                out.failure = Some(e);
                break;
            }
        }
    }
    Ok(out)
}

/// One row per sample of `split`: `sample_id,label,split,e0..`.
pub fn export_embeddings(
    checkpoint: &ModelCheckpoint,
    manifest: &DatasetManifest,
    split: Split,
    csv_path: &Path,
) -> Result<usize> {
    let indices = manifest.indices(split);
    if indices.is_empty() {
        return Err(Error::EmptyDataset(format!("{split} split is empty")));
    }
    let embeddings = embed(checkpoint, manifest, &indices)?;
    let file = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["sample_id".to_string(), "label".into(), "split".into()];
    header.extend((0..checkpoint.vit.embed_dim).map(|k| format!("e{k}")));
    w.write_record(&header).map_err(|e| csv_error(csv_path, e))?;
    for (&i, e) in indices.iter().zip(&embeddings) {
        let s = manifest.sample(i);
        let mut row = vec![
            s.sample_id().to_string(),
            s.label().label().as_str().to_string(),
            split.as_str().to_string(),
        ];
        row.extend(e.values().iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| csv_error(csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    Ok(indices.len())
}

pub fn load_data(config: &ExperimentConfig, data: &Path) -> Result<DatasetManifest> {
    load_manifest(&resolve_manifest(data, config.domain))
}

