//! Run configuration: strict JSON with a default for every field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{sha256_hex, DatasetConfig};
use crate::error::{Error, Result};
use crate::heads::McbConfig;
use crate::loss::TripletConfig;
use crate::mfaf::MfafConfig;
use crate::model::ModelConfig;
use crate::retrieval::MetricConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by `gamma`.
    pub milestones: [usize; 2],
    pub gamma: f64,
    pub epochs: usize,
    /// Global gradient-norm ceiling applied before each step; 0 disables it.
    pub max_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: [30, 45],
            gamma: 0.1,
            epochs: 50,
            max_grad_norm: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.gamma.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Classes per batch (P).
    pub classes_per_batch: usize,
    /// Drone images per class per batch (Q), next to the class's satellite image.
    pub drones_per_class: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            classes_per_batch: 4,
            drones_per_class: 2,
        }
    }
}

/// Random position shifts applied to training drone images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability that a drone image is shifted; 0 disables augmentation.
    pub shift_prob: f64,
    /// Largest strip width in pixels, drawn uniformly from `1..=max_shift_px`.
    pub max_shift_px: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shift_prob: 0.5,
            max_shift_px: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub mfaf: MfafConfig,
    pub mcb: McbConfig,
    pub loss: TripletConfig,
    pub optim: OptimConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    pub metrics: MetricConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            seed: 0,
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            mfaf: MfafConfig::default(),
            mcb: McbConfig::default(),
            loss: TripletConfig::default(),
            optim: OptimConfig::default(),
            sampler: SamplerConfig::default(),
            augment: AugmentConfig::default(),
            metrics: MetricConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            mfaf: self.mfaf.clone(),
            mcb: self.mcb,
        }
    }

    /// Serialises with sorted keys, so equal configs give equal text.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serialises");
        serde_json::to_string(&v).expect("value serialises")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    /// Cross-field checks that must hold before anything is trained.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        self.dataset.validate().map_err(|e| cfg(&e))?;
        self.backbone.validate().map_err(|e| cfg(&e))?;
        self.mfaf.validate(self.backbone.channels).map_err(|e| cfg(&e))?;
        if self.backbone.image_size != self.dataset.image_size {
            return Err(Error::Config(format!(
                "backbone.image_size {} differs from dataset.image_size {}",
                self.backbone.image_size, self.dataset.image_size
            )));
        }
        if self.mcb.num_classes != self.dataset.num_classes {
            return Err(Error::Config(format!(
                "mcb.num_classes {} differs from dataset.num_classes {}",
                self.mcb.num_classes, self.dataset.num_classes
            )));
        }
        if self.loss.margin < 0.0 {
            return Err(Error::Config("loss.margin must be non-negative".into()));
        }
        if self.sampler.classes_per_batch < 2 || self.sampler.drones_per_class < 1 {
            return Err(Error::Config(
                "sampler needs at least 2 classes and 1 drone image per class".into(),
            ));
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.shift_prob)
            || (a.shift_prob > 0.0 && (a.max_shift_px == 0 || a.max_shift_px >= self.dataset.image_size))
        {
            return Err(Error::Config(
                "augment needs shift_prob in [0, 1] and 1 <= max_shift_px < image_size".into(),
            ));
        }
        if !(self.optim.max_grad_norm >= 0.0) {
            return Err(Error::Config("optim.max_grad_norm must be non-negative".into()));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config("optim.lr must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse(r#"{"seed": 1, "sed": 2}"#).is_err());
        assert!(RunConfig::parse(r#"{"mfaf": {"hf_brnch": false}}"#).is_err());
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = RunConfig::parse(r#"{"seed": 3, "mfaf": {"pooling": "mp", "hf_branch": false}}"#).unwrap();
        let b = RunConfig::parse(r#"{"mfaf": {"hf_branch": false, "pooling": "mp"}, "seed": 3}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), RunConfig::default().hash());
        let round = RunConfig::parse(&a.canonical_json()).unwrap();
        assert_eq!(round.hash(), a.hash());
    }

    #[test]
    fn milestones_decay() {
        let o = OptimConfig::default();
        assert_eq!(o.lr_at(0), 0.05);
        assert!((o.lr_at(30) - 0.005).abs() < 1e-15);
        assert!((o.lr_at(49) - 0.0005).abs() < 1e-15);
    }
}
