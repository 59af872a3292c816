use std::time::Instant;

use rand::seq::SliceRandom;

use super::checkpoint::{ModelCheckpoint, Provenance, Stage};
use super::optim::{cosine_lr, Sgd};
use super::{at_resolution, ScpConfig, TrainReport};
use crate::augment::make_views;
use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::data::{DatasetManifest, Split, UnlabeledView};
use crate::error::{Error, Result};
use crate::objectives::{halves_pairing, nt_xent, simsiam_loss, Objective, SimSiamHeads};
use crate::rng::{derive_seed, rng_for};
use crate::vit::VisionTransformer;

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const VIEW_STREAM: u64 = 3;

struct Model {
    vit: VisionTransformer,
    heads: SimSiamHeads,
}

/// Mean over dimensions of the per-dimension std of L2-normalised rows.
pub(crate) fn normalized_std(rows: &[f64], dim: usize) -> f64 {
    let n = rows.len() / dim;
    if n < 2 {
        return 0.0;
    }
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for row in rows.chunks(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (k, v) in row.iter().enumerate() {
            let u = v / norm;
            sum[k] += u;
            sq[k] += u * u;
        }
    }
    let n = n as f64;
    (0..dim)
        .map(|k| (sq[k] / n - (sum[k] / n).powi(2)).max(0.0).sqrt())
        .sum::<f64>()
        / dim as f64
}

/// Runs one forward/backward over `views`, accumulating `weight * loss`
/// gradients into `params`. Returns the unweighted loss and the projector
/// outputs.
fn chunk_step(
    model: &Model,
    config: &ScpConfig,
    params: &mut ParamStore,
    views: &[(Tensor, Tensor)],
    weight: f64,
) -> Result<(f64, Vec<f64>)> {
    let m = views.len();
    let images: Vec<&Tensor> = views.iter().map(|v| &v.0).chain(views.iter().map(|v| &v.1)).collect();
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let e = model.vit.forward(&mut g, &bound, &images)?;
    let z = model.heads.project(&mut g, &bound, e)?;
    let loss = match config.objective {
        Objective::SimSiam => {
            let p = model.heads.predict(&mut g, &bound, z)?;
            let (z1, z2) = (g.slice_rows(z, 0, m)?, g.slice_rows(z, m, m)?);
            let (p1, p2) = (g.slice_rows(p, 0, m)?, g.slice_rows(p, m, m)?);
            simsiam_loss(&mut g, p1, p2, z1, z2, config.stop_gradient)?
        }
        Objective::NtXent => nt_xent(&mut g, z, &halves_pairing(m), config.temperature)?,
    };
    let value = g.scalar(loss)?;
    let weighted = g.scale(loss, weight)?;
    let grads = g.backward(weighted)?;
    params.accumulate(&bound, &grads)?;
    Ok((value, g.value(z).to_vec()))
}

fn views_for(
    data: &UnlabeledView<'_>,
    config: &ScpConfig,
    epoch: usize,
    chunk: &[usize],
) -> Result<Vec<(Tensor, Tensor)>> {
    chunk
        .iter()
        .map(|&j| {
            let image = at_resolution(data.pixels(j), config.vit.image_size)?;
            let seed = derive_seed(config.seed, &[VIEW_STREAM, epoch as u64, j as u64]);
            make_views(&image, &config.augment, seed)
        })
        .collect()
}

/// Label-free pretraining of encoder, projector and predictor on the
/// training split.
pub fn pretrain_scp(manifest: &DatasetManifest, config: &ScpConfig) -> Result<(ModelCheckpoint, TrainReport)> {
    config.validate()?;
    crate::runtime::retain_heap();
    let started = Instant::now();
    let data = manifest.unlabeled(Split::Train);
    if data.is_empty() {
        return Err(Error::EmptyDataset("train split is empty".into()));
    }
    let n = data.len();
    if n < config.objective.min_batch_size() {
        return Err(Error::InvalidArgument(format!(
            "{} needs at least {} training samples, got {n}",
            config.objective.as_str(),
            config.objective.min_batch_size()
        )));
    }

    let vit = VisionTransformer::new(config.vit.clone())?;
    let heads = SimSiamHeads::new(
        config.heads.clone(),
        config.vit.embed_dim,
        config.vit.gelu,
        config.vit.layer_norm_eps,
    )?;
    let mut params = ParamStore::new();
    let mut init_rng = rng_for(config.seed, &[INIT_STREAM]);
    vit.init_params(&mut params, &mut init_rng)?;
    heads.init_params(&mut params, &mut init_rng)?;
    let model = Model { vit, heads };

    let mut opt = Sgd::new(config.momentum, config.weight_decay)?;
    let batch = config.batch_size.min(n);
    let lr0 = config.lr_for(batch);
    let dim = config.heads.proj_dim;
    let mut report = TrainReport {
        train_samples: n,
        ..TrainReport::default()
    };

    for epoch in 0..config.epochs {
        let lr = cosine_lr(lr0, epoch, config.epochs);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(config.seed, &[SHUFFLE_STREAM, epoch as u64]));

        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        let mut projections = Vec::with_capacity(2 * n * dim);
        for b in order.chunks(batch) {
            // a short tail batch cannot form NT-Xent negatives
            if b.len() < config.objective.min_batch_size() {
                continue;
            }
            let chunk_len = match config.objective {
                Objective::SimSiam => config.micro_batch,
                Objective::NtXent => b.len(),
            };
            let mut batch_loss = 0.0;
            for chunk in b.chunks(chunk_len) {
                let views = views_for(&data, config, epoch, chunk)?;
                let weight = chunk.len() as f64 / b.len() as f64;
                let (loss, z) = chunk_step(&model, config, &mut params, &views, weight)?;
                batch_loss += weight * loss;
                projections.extend_from_slice(&z);
            }
            opt.step(&mut params, lr)?;
            loss_sum += batch_loss;
            steps += 1;
        }
        report.losses.push(loss_sum / steps.max(1) as f64);
        report.embed_std.push(normalized_std(&projections, dim));
    }
    report.wall_seconds = started.elapsed().as_secs_f64();

    let ckpt = ModelCheckpoint::new(
        config.vit.clone(),
        config.heads.clone(),
        params,
        Provenance {
            stage: Stage::Scp,
            seed: config.seed,
            epochs: config.epochs,
            batch_size: config.batch_size,
            dataset_fraction: 1.0,
            objective: Some(config.objective),
        },
    );
    Ok((ckpt, report))
}
