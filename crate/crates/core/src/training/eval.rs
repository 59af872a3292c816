use super::checkpoint::ModelCheckpoint;
use super::at_resolution;
use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::labels::{LabelVector, PredictionVector, SequenceLabel, NUM_LABELS};
use crate::metrics::{mean_label_auc, LabelAuc};
use crate::objectives::head_forward;
use crate::vit::{encode_batch, Embedding, ViTConfig, VisionTransformer};

const EVAL_CHUNK: usize = 64;

pub(crate) fn predict_params(
    params: &ParamStore,
    vit_config: &ViTConfig,
    manifest: &DatasetManifest,
    indices: &[usize],
) -> Result<Vec<PredictionVector>> {
    if !params.contains("head.weight") {
        return Err(Error::Contract("model has no classification head".into()));
    }
    let vit = VisionTransformer::new(vit_config.clone())?;
    let mut frozen = params.clone();
    frozen.set_trainable(|_| false);
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let images = chunk
            .iter()
            .map(|&i| at_resolution(manifest.pixels(i), vit_config.image_size))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = images.iter().map(|c| c.as_ref()).collect();
        let mut g = Graph::new();
        let bound = frozen.bind(&mut g)?;
        let e = vit.forward(&mut g, &bound, &refs)?;
        let probs = head_forward(&mut g, &bound, e)?;
        for row in g.value(probs).chunks(NUM_LABELS) {
            out.push(PredictionVector::new(row.try_into().expect("five labels"))?);
        }
    }
    Ok(out)
}

/// Head outputs for the given samples. Images whose size differs from the
/// encoder input are resampled first.
pub fn predict(checkpoint: &ModelCheckpoint, manifest: &DatasetManifest, indices: &[usize]) -> Result<Vec<PredictionVector>> {
    predict_params(&checkpoint.params, &checkpoint.vit, manifest, indices)
}

/// Encoder outputs for the given samples, resampled to the encoder input
/// size where needed.
pub fn embed(checkpoint: &ModelCheckpoint, manifest: &DatasetManifest, indices: &[usize]) -> Result<Vec<Embedding>> {
    let size = checkpoint.vit.image_size;
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let images = chunk
            .iter()
            .map(|&i| at_resolution(manifest.pixels(i), size))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = images.iter().map(|c| c.as_ref()).collect();
        out.extend(encode_batch(&refs, &checkpoint.params, &checkpoint.vit)?);
    }
    Ok(out)
}

/// One-vs-rest AUC per label in `label_subset` over `split`, and their mean
/// over the labels whose AUC is defined.
pub fn evaluate(
    checkpoint: &ModelCheckpoint,
    manifest: &DatasetManifest,
    split: Split,
    label_subset: &[SequenceLabel],
) -> Result<LabelAuc> {
    let indices = manifest.indices(split);
    if indices.is_empty() {
        return Err(Error::EmptyDataset(format!("{split} split is empty")));
    }
    let preds = predict(checkpoint, manifest, &indices)?;
    let labels: Vec<LabelVector> = indices.iter().map(|&i| manifest.sample(i).label()).collect();
    mean_label_auc(&preds, &labels, label_subset)
}
