use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::GeluForm;
use crate::data::{Domain, Split};
use crate::error::{Error, Result};
use crate::labels::SequenceLabel;
use crate::objectives::Objective;
use crate::training::{ScpConfig, SupervisedConfig};
use crate::vit::Pooling;

/// Every tunable of a CLI run. Values come from defaults, then an optional
/// `key=value` file, then command-line flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub patients: usize,
    pub images_per_patient: usize,
    pub external_patients: usize,
    pub scp: ScpConfig,
    pub supervised: SupervisedConfig,
    /// Labels scored by evaluation; `None` means the manifest domain's labels.
    pub labels: Option<Vec<SequenceLabel>>,
    pub domain: Domain,
    pub split: Split,
    pub batch_sizes: Vec<usize>,
    pub fractions: Vec<f64>,
    pub ft_epochs_list: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            patients: 200,
            images_per_patient: 2,
            external_patients: 60,
            scp: ScpConfig::default(),
            supervised: SupervisedConfig::default(),
            labels: None,
            domain: Domain::Internal,
            split: Split::Test,
            batch_sizes: vec![4, 16, 64, 256, 1024],
            fractions: vec![0.01, 0.03, 0.10, 0.30, 1.00],
            ft_epochs_list: vec![10, 50],
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "patients",
    "images_per_patient",
    "external_patients",
    "objective",
    "temperature",
    "scp_epochs",
    "scp_batch_size",
    "base_lr",
    "scp_momentum",
    "scp_weight_decay",
    "stop_gradient",
    "scp_micro_batch",
    "ft_epochs",
    "ft_batch_size",
    "ft_lr",
    "ft_momentum",
    "ft_weight_decay",
    "fraction",
    "head_only",
    "encoder_lr_scale",
    "ft_micro_batch",
    "labels",
    "domain",
    "split",
    "batch_sizes",
    "fractions",
    "ft_epochs_list",
    "vit.image_size",
    "vit.patch_size",
    "vit.embed_dim",
    "vit.num_heads",
    "vit.depth",
    "vit.mlp_ratio",
    "vit.pooling",
    "vit.gelu",
    "vit.layer_norm_eps",
    "vit.input_mean",
    "vit.input_std",
    "heads.proj_dim",
    "heads.pred_hidden",
    "heads.use_predictor",
    "augment.flip_prob",
    "augment.rotation_prob",
    "augment.rotation_max_degrees",
    "augment.elastic_prob",
    "augment.elastic_alpha",
    "augment.elastic_sigma",
];

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::Parse {
        what: "config value",
        detail: format!("{key}={raw}"),
    })
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| value(key, t))
        .collect()
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let s = &mut self.scp;
        let f = &mut self.supervised;
        match key {
            "seed" => self.seed = value(key, raw)?,
            "patients" => self.patients = value(key, raw)?,
            "images_per_patient" => self.images_per_patient = value(key, raw)?,
            "external_patients" => self.external_patients = value(key, raw)?,
            "objective" => s.objective = Objective::parse(raw.trim())?,
            "temperature" => s.temperature = value(key, raw)?,
            "scp_epochs" => s.epochs = value(key, raw)?,
            "scp_batch_size" => s.batch_size = value(key, raw)?,
            "base_lr" => s.base_lr = value(key, raw)?,
            "scp_momentum" => s.momentum = value(key, raw)?,
            "scp_weight_decay" => s.weight_decay = value(key, raw)?,
            "stop_gradient" => s.stop_gradient = value(key, raw)?,
            "scp_micro_batch" => s.micro_batch = value(key, raw)?,
            "ft_epochs" => f.epochs = value(key, raw)?,
            "ft_batch_size" => f.batch_size = value(key, raw)?,
            "ft_lr" => f.lr = value(key, raw)?,
            "ft_momentum" => f.momentum = value(key, raw)?,
            "ft_weight_decay" => f.weight_decay = value(key, raw)?,
            "fraction" => f.fraction = value(key, raw)?,
            "head_only" => f.head_only = value(key, raw)?,
            "encoder_lr_scale" => f.encoder_lr_scale = value(key, raw)?,
            "ft_micro_batch" => f.micro_batch = value(key, raw)?,
            "labels" => self.labels = Some(SequenceLabel::parse_list(raw)?),
            "domain" => self.domain = value(key, raw)?,
            "split" => self.split = value(key, raw)?,
            "batch_sizes" => self.batch_sizes = list(key, raw)?,
            "fractions" => self.fractions = list(key, raw)?,
            "ft_epochs_list" => self.ft_epochs_list = list(key, raw)?,
            "vit.image_size" => s.vit.image_size = value(key, raw)?,
            "vit.patch_size" => s.vit.patch_size = value(key, raw)?,
            "vit.embed_dim" => s.vit.embed_dim = value(key, raw)?,
            "vit.num_heads" => s.vit.num_heads = value(key, raw)?,
            "vit.depth" => s.vit.depth = value(key, raw)?,
            "vit.mlp_ratio" => s.vit.mlp_ratio = value(key, raw)?,
            "vit.pooling" => s.vit.pooling = Pooling::parse(raw.trim())?,
            "vit.gelu" => s.vit.gelu = GeluForm::parse(raw.trim())?,
            "vit.layer_norm_eps" => s.vit.layer_norm_eps = value(key, raw)?,
            "vit.input_mean" => s.vit.input_mean = value(key, raw)?,
            "vit.input_std" => s.vit.input_std = value(key, raw)?,
            "heads.proj_dim" => s.heads.proj_dim = value(key, raw)?,
            "heads.pred_hidden" => s.heads.pred_hidden = value(key, raw)?,
            "heads.use_predictor" => s.heads.use_predictor = value(key, raw)?,
            "augment.flip_prob" => s.augment.flip_prob = value(key, raw)?,
            "augment.rotation_prob" => s.augment.rotation_prob = value(key, raw)?,
            "augment.rotation_max_degrees" => s.augment.rotation_max_degrees = value(key, raw)?,
            "augment.elastic_prob" => s.augment.elastic_prob = value(key, raw)?,
            "augment.elastic_alpha" => s.augment.elastic_alpha = value(key, raw)?,
            "augment.elastic_sigma" => s.augment.elastic_sigma = value(key, raw)?,
            _ => {
                return Err(Error::InvalidArgument(format!("unknown config key `{key}`")));
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| Error::Parse {
                what: "config line",
                detail: format!("line {}: expected key=value, got `{line}`", n + 1),
            })?;
            self.set(key.trim(), raw)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Copies the run seed into the stage configs and checks every field.
    pub fn finalize(&mut self) -> Result<()> {
        self.scp.seed = self.seed;
        self.supervised.seed = self.seed;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let classes = SequenceLabel::ALL.len();
        if self.patients < classes || self.external_patients < classes {
            return bad(format!("patient counts must be at least {classes}"));
        }
        if self.images_per_patient == 0 {
            return bad("images_per_patient must be >= 1".into());
        }
        self.scp.validate()?;
        self.supervised.validate()?;
        if self.batch_sizes.is_empty() || self.fractions.is_empty() || self.ft_epochs_list.is_empty() {
            return bad("batch_sizes, fractions and ft_epochs_list must be non-empty".into());
        }
        let min = self.scp.objective.min_batch_size();
        if let Some(b) = self.batch_sizes.iter().find(|&&b| b < min) {
            return bad(format!("batch size {b} is below the {} minimum of {min}", self.scp.objective.as_str()));
        }
        if let Some(f) = self.fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return bad(format!("fraction {f} outside (0, 1]"));
        }
        if self.ft_epochs_list.contains(&0) {
            return bad("ft_epochs_list entries must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_listed_key_is_accepted() {
        let samples = [
            ("objective", "nt_xent"),
            ("labels", "T1,T2"),
            ("domain", "external_A"),
            ("split", "val"),
            ("batch_sizes", "4,16"),
            ("fractions", "0.1,0.3"),
            ("ft_epochs_list", "10"),
            ("vit.pooling", "mean"),
            ("vit.gelu", "exact"),
            ("stop_gradient", "true"),
            ("heads.use_predictor", "false"),
            ("head_only", "false"),
        ];
        for key in KEYS {
            let raw = samples.iter().find(|s| s.0 == *key).map_or("1", |s| s.1);
            ExperimentConfig::default().set(key, raw).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn text_with_comments_and_unknown_keys() {
        let mut c = ExperimentConfig::default();
        c.apply_text("# grid\nscp_epochs = 3  # short\n\nfractions=0.1, 0.3\n").unwrap();
        assert_eq!(c.scp.epochs, 3);
        assert_eq!(c.fractions, vec![0.1, 0.3]);
        assert!(c.apply_text("no_such_key=1").is_err());
        assert!(c.apply_text("scp_epochs").is_err());
        assert!(c.apply_text("scp_epochs=three").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = ExperimentConfig::default();
        c.finalize().unwrap();
        c.patients = 4;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.fractions = vec![0.0];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.set("objective", "nt_xent").unwrap();
        c.batch_sizes = vec![1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn seed_reaches_stage_configs() {
        let mut c = ExperimentConfig::default();
        c.set("seed", "9").unwrap();
        c.finalize().unwrap();
        assert_eq!((c.scp.seed, c.supervised.seed), (9, 9));
    }
}
