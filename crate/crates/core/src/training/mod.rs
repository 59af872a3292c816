//! Self-supervised pretraining, supervised fine-tuning / training from
//! scratch, evaluation and checkpoint persistence.

mod checkpoint;
mod eval;
mod optim;
mod scp;
mod supervised;

use std::borrow::Cow;

use crate::augment::AugmentPolicy;
use crate::autodiff::Tensor;
use crate::data::resample;
use crate::error::{Error, Result};
use crate::metrics::LabelAuc;
use crate::objectives::{HeadsConfig, Objective};
use crate::vit::ViTConfig;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, ModelCheckpoint,
    Provenance, Stage, CHECKPOINT_MAGIC, FORMAT_VERSION,
};
pub use eval::{embed, evaluate, predict};
pub use optim::{cosine_lr, Sgd};
pub use scp::pretrain_scp;
pub use supervised::{finetune, train_supervised};

/// Collapse-monitor threshold on the per-dimension std of normalised
/// projector outputs.
pub const COLLAPSE_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct ScpConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub objective: Objective,
    pub temperature: f64,
    /// Learning rate per 256 samples in a step.
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub stop_gradient: bool,
    /// Largest number of source images per forward graph. SimSiam
    /// gradients are accumulated across chunks, with head batch-norm
    /// statistics taken per chunk; NT-Xent always uses the whole batch.
    pub micro_batch: usize,
    pub augment: AugmentPolicy,
    pub vit: ViTConfig,
    pub heads: HeadsConfig,
}

impl Default for ScpConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 64,
            objective: Objective::SimSiam,
            temperature: 1.0,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            stop_gradient: true,
            micro_batch: 32,
            augment: AugmentPolicy::default(),
            vit: ViTConfig::default(),
            heads: HeadsConfig::default(),
        }
    }
}

impl ScpConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.heads.validate()?;
        self.augment.validate()?;
        if self.epochs == 0 || self.micro_batch == 0 {
            return Err(Error::InvalidArgument("epochs and micro_batch must be >= 1".into()));
        }
        if self.batch_size < self.objective.min_batch_size() {
            return Err(Error::InvalidArgument(format!(
                "batch size {} is below the {} minimum of {}",
                self.batch_size,
                self.objective.as_str(),
                self.objective.min_batch_size()
            )));
        }
        if !(self.temperature > 0.0) || !(self.base_lr > 0.0) {
            return Err(Error::InvalidArgument(
                "temperature and base_lr must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Linear scaling rule on the number of samples in a step.
    pub fn lr_for(&self, step_size: usize) -> f64 {
        self.base_lr * step_size as f64 / 256.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Share of training patients used.
    pub fraction: f64,
    /// Train only the classification head on frozen encoder features.
    pub head_only: bool,
    /// Learning-rate multiplier for pretrained encoder weights when fine-tuning;
    /// training from scratch always uses the full rate.
    pub encoder_lr_scale: f64,
    pub micro_batch: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            fraction: 1.0,
            head_only: false,
            encoder_lr_scale: 1.0,
            micro_batch: 32,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch_size and micro_batch must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if !(self.encoder_lr_scale >= 0.0 && self.encoder_lr_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "encoder_lr_scale {} must be finite and >= 0",
                self.encoder_lr_scale
            )));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "fraction {} outside (0, 1]",
                self.fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    /// Collapse monitor per epoch; empty for supervised runs.
    pub embed_std: Vec<f64>,
    /// Validation AUC after the last epoch, when the validation split
    /// supports one.
    pub val_auc: Option<LabelAuc>,
    /// Training samples (patients' images) actually used.
    pub train_samples: usize,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn final_embed_std(&self) -> Option<f64> {
        self.embed_std.last().copied()
    }
}

/// `image` at the encoder resolution, resampled only when it differs.
fn at_resolution(image: &Tensor, size: usize) -> Result<Cow<'_, Tensor>> {
    if image.shape() == [size, size] {
        Ok(Cow::Borrowed(image))
    } else {
        Ok(Cow::Owned(resample(image, size)?))
    }
}
