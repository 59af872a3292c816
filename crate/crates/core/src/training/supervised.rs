use std::time::Instant;

use rand::seq::SliceRandom;

use super::checkpoint::{ModelCheckpoint, Provenance, Stage};
use super::eval::predict_params;
use super::optim::{cosine_lr, Sgd};
use super::{at_resolution, SupervisedConfig, TrainReport};
use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::data::{subsample_fraction, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::labels::{LabelVector, SequenceLabel};
use crate::metrics::mean_label_auc;
use crate::objectives::{bce_loss, head_forward, init_classification_head, HeadsConfig, HEAD_PREFIX, PREDICTOR_PREFIX, PROJECTOR_PREFIX};
use crate::rng::rng_for;
use crate::vit::{ViTConfig, VisionTransformer};

const INIT_STREAM: u64 = 11;
const HEAD_STREAM: u64 = 12;
const SHUFFLE_STREAM: u64 = 13;
const SUBSAMPLE_STREAM: u64 = 14;

/// Trains `params` with per-label BCE on the (subsampled) training split and
/// reports validation AUC when the validation split allows one.
fn fit(
    params: &mut ParamStore,
    vit_config: &ViTConfig,
    manifest: &DatasetManifest,
    config: &SupervisedConfig,
    encoder_lr_scale: f64,
) -> Result<TrainReport> {
    crate::runtime::retain_heap();
    let started = Instant::now();
    let train = subsample_fraction(manifest, config.fraction, crate::rng::derive_seed(config.seed, &[SUBSAMPLE_STREAM]))?;
    let indices = train.indices(Split::Train);
    if indices.is_empty() {
        return Err(Error::EmptyDataset("training subsample is empty".into()));
    }
    let vit = VisionTransformer::new(vit_config.clone())?;
    if config.head_only {
        params.set_trainable(|name| name.starts_with(HEAD_PREFIX));
    }

    let n = indices.len();
    let batch = config.batch_size.min(n);
    let mut opt = Sgd::new(config.momentum, config.weight_decay)?;
    let mut report = TrainReport {
        train_samples: n,
        ..TrainReport::default()
    };
    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.lr, epoch, config.epochs);
        let mut order = indices.clone();
        order.shuffle(&mut rng_for(config.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for b in order.chunks(batch) {
            let mut batch_loss = 0.0;
            for chunk in b.chunks(config.micro_batch) {
                let images = chunk
                    .iter()
                    .map(|&i| at_resolution(train.pixels(i), vit_config.image_size))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Tensor> = images.iter().map(|c| c.as_ref()).collect();
                let targets: Vec<LabelVector> = chunk.iter().map(|&i| train.sample(i).label()).collect();

                let mut g = Graph::new();
                let bound = params.bind(&mut g)?;
                let e = vit.forward(&mut g, &bound, &refs)?;
                let probs = head_forward(&mut g, &bound, e)?;
                let loss = bce_loss(&mut g, probs, &targets)?;
                let weight = chunk.len() as f64 / b.len() as f64;
                batch_loss += weight * g.scalar(loss)?;
                let weighted = g.scale(loss, weight)?;
                let grads = g.backward(weighted)?;
                params.accumulate(&bound, &grads)?;
            }
            opt.step_scaled(params, lr, |name| {
                if name.starts_with(HEAD_PREFIX) {
                    1.0
                } else {
                    encoder_lr_scale
                }
            })?;
            loss_sum += batch_loss;
            steps += 1;
        }
        report.losses.push(loss_sum / steps as f64);
    }
    params.set_trainable(|_| true);

    let val = manifest.indices(Split::Val);
    if !val.is_empty() {
        let preds = predict_params(params, vit_config, manifest, &val)?;
        let labels: Vec<LabelVector> = val.iter().map(|&i| manifest.sample(i).label()).collect();
        report.val_auc = mean_label_auc(&preds, &labels, &SequenceLabel::ALL).ok();
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Replaces the projector/predictor of an SCP checkpoint with a fresh
/// classification head and trains with BCE, end to end unless
/// `config.head_only`.
pub fn finetune(
    checkpoint: &ModelCheckpoint,
    manifest: &DatasetManifest,
    config: &SupervisedConfig,
) -> Result<(ModelCheckpoint, TrainReport)> {
    config.validate()?;
    if checkpoint.provenance.stage != Stage::Scp {
        return Err(Error::StageMismatch {
            expected: Stage::Scp.to_string(),
            found: checkpoint.provenance.stage.to_string(),
        });
    }
    let mut params = checkpoint.params.clone();
    params.remove_prefix(PROJECTOR_PREFIX);
    params.remove_prefix(PREDICTOR_PREFIX);
    params.remove_prefix(HEAD_PREFIX);
    params.set_trainable(|_| true);
    init_classification_head(
        &mut params,
        checkpoint.vit.embed_dim,
        &mut rng_for(config.seed, &[HEAD_STREAM]),
    )?;
    let report = fit(&mut params, &checkpoint.vit, manifest, config, config.encoder_lr_scale)?;
    let ckpt = ModelCheckpoint::new(
        checkpoint.vit.clone(),
        checkpoint.heads.clone(),
        params,
        Provenance {
            stage: Stage::Ft,
            seed: config.seed,
            epochs: config.epochs,
            batch_size: config.batch_size,
            dataset_fraction: config.fraction,
            objective: checkpoint.provenance.objective,
        },
    );
    Ok((ckpt, report))
}

/// Encoder and head from random initialisation, trained with BCE only.
pub fn train_supervised(
    manifest: &DatasetManifest,
    vit: &ViTConfig,
    config: &SupervisedConfig,
) -> Result<(ModelCheckpoint, TrainReport)> {
    config.validate()?;
    let encoder = VisionTransformer::new(vit.clone())?;
    let mut params = ParamStore::new();
    encoder.init_params(&mut params, &mut rng_for(config.seed, &[INIT_STREAM]))?;
    init_classification_head(&mut params, vit.embed_dim, &mut rng_for(config.seed, &[HEAD_STREAM]))?;
    let report = fit(&mut params, vit, manifest, config, 1.0)?;
    let ckpt = ModelCheckpoint::new(
        vit.clone(),
        HeadsConfig::default(),
        params,
        Provenance {
            stage: Stage::Sl,
            seed: config.seed,
            epochs: config.epochs,
            batch_size: config.batch_size,
            dataset_fraction: config.fraction,
            objective: None,
        },
    );
    Ok((ckpt, report))
}
