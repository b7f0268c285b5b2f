//! Declarative run configuration shared by every pipeline stage.

use serde::{Deserialize, Serialize};

use crate::data::{AugmentOps, DatasetSpec};
use crate::error::{Error, Result};
use crate::losses::{DEFAULT_ALPHA, DEFAULT_MARGIN, DEFAULT_SMOOTHING, DEFAULT_TEMPERATURE};
use crate::network::ModelConfig;
use crate::rggr::{DEFAULT_P, DEFAULT_TOP_K};

/// Default pruning threshold.
pub const DEFAULT_LAMBDA: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            widths: m.widths,
            blocks_per_stage: m.blocks_per_stage,
            embedding_dim: m.embedding_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub smoothing: f64,
    pub margin: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smoothing: DEFAULT_SMOOTHING,
            margin: DEFAULT_MARGIN,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

/// Optimiser and batching schedule of one training stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    /// `P` of PK sampling.
    pub identities_per_batch: usize,
    /// `S` of PK sampling.
    pub samples_per_identity: usize,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Schedule {
    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.batches_per_epoch) as u64
    }

    pub fn batch_size(&self) -> usize {
        self.identities_per_batch * self.samples_per_identity
    }

    pub fn validate(&self, stage: &str) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("[{stage}] {m}")));
        if self.epochs == 0 || self.batches_per_epoch == 0 {
            return bad("epochs and batches_per_epoch must be positive".into());
        }
        if self.identities_per_batch < 2 || self.samples_per_identity < 2 {
            return bad(format!(
                "PK batches need identities_per_batch >= 2 and samples_per_identity >= 2, got {}x{}",
                self.identities_per_batch, self.samples_per_identity
            ));
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("peak_lr", self.peak_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if self.momentum >= 1.0 {
            return bad("momentum must be below 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// Copy the teacher's weights and insert identity compactors.
    Teacher,
    /// Fresh initialisation from the run seed.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub identities_per_batch: usize,
    pub samples_per_identity: usize,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rggr_activation_epoch: usize,
    pub alpha: f64,
    pub p: f64,
    pub top_k: usize,
    pub queue_capacity: usize,
    pub student_init: StudentInit,
}

impl DistillConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            epochs: self.epochs,
            batches_per_epoch: self.batches_per_epoch,
            identities_per_batch: self.identities_per_batch,
            samples_per_identity: self.samples_per_identity,
            base_lr: self.base_lr,
            peak_lr: self.peak_lr,
            warmup_epochs: self.warmup_epochs,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate("distill")?;
        let bad = |m: String| Err(Error::Config(format!("[distill] {m}")));
        if self.rggr_activation_epoch > self.epochs {
            return bad(format!(
                "rggr_activation_epoch {} exceeds epochs {}",
                self.rggr_activation_epoch, self.epochs
            ));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!(
                "alpha = {} must be finite and non-negative",
                self.alpha
            ));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return bad(format!("p = {} must lie in (0, 1]", self.p));
        }
        if self.top_k == 0 || self.queue_capacity == 0 {
            return bad("top_k and queue_capacity must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvertConfig {
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialisation, batch order and augmentation.
    pub seed: u64,
    pub data: DatasetSpec,
    pub augment: AugmentOps,
    pub model: ArchConfig,
    pub loss: LossConfig,
    pub teacher: Schedule,
    pub distill: DistillConfig,
    pub convert: ConvertConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let distill = DistillConfig {
            epochs: 40,
            batches_per_epoch: 300,
            identities_per_batch: 4,
            samples_per_identity: 4,
            base_lr: 1e-3,
            peak_lr: 1e-2,
            warmup_epochs: 4,
            momentum: 0.9,
            weight_decay: 5e-4,
            rggr_activation_epoch: 9,
            alpha: DEFAULT_ALPHA,
            p: DEFAULT_P,
            top_k: DEFAULT_TOP_K,
            queue_capacity: 128,
            student_init: StudentInit::Teacher,
        };
        Self {
            seed: 0,
            data: DatasetSpec::default(),
            augment: AugmentOps::default(),
            model: ArchConfig::default(),
            loss: LossConfig::default(),
            teacher: Schedule {
                epochs: 20,
                batches_per_epoch: 40,
                identities_per_batch: 4,
                samples_per_identity: 4,
                base_lr: 1e-3,
                peak_lr: 1e-2,
                warmup_epochs: 2,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            distill,
            convert: ConvertConfig {
                lambda: DEFAULT_LAMBDA,
            },
        }
    }
}

impl RunConfig {
    /// Parse and validate. Parse errors carry the line, column and field.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let counts = self.data.validate()?;
        self.augment.validate()?;
        self.model_config(false).validate()?;
        self.teacher.validate("teacher")?;
        self.distill.validate()?;
        for (stage, s) in [
            ("teacher", self.teacher),
            ("distill", self.distill.schedule()),
        ] {
            if s.identities_per_batch > counts.train_ids {
                return Err(Error::Config(format!(
                    "[{stage}] identities_per_batch {} exceeds the {} training identities",
                    s.identities_per_batch, counts.train_ids
                )));
            }
            if s.samples_per_identity > self.data.images_per_identity {
                return Err(Error::Config(format!(
                    "[{stage}] samples_per_identity {} exceeds images_per_identity {}",
                    s.samples_per_identity, self.data.images_per_identity
                )));
            }
        }
        if !(self.convert.lambda > 0.0) || !self.convert.lambda.is_finite() {
            return Err(Error::Config(format!(
                "[convert] lambda = {} must be positive",
                self.convert.lambda
            )));
        }
        for (name, v) in [
            ("smoothing", self.loss.smoothing),
            ("margin", self.loss.margin),
            ("temperature", self.loss.temperature),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "[loss] {name} = {v} must be finite and non-negative"
                )));
            }
        }
        if self.loss.temperature == 0.0 || self.loss.smoothing >= 1.0 {
            return Err(Error::Config(
                "[loss] temperature must be positive and smoothing below 1".into(),
            ));
        }
        Ok(())
    }

    /// Network topology implied by the data and architecture sections.
    pub fn model_config(&self, with_compactors: bool) -> ModelConfig {
        let train_ids = self.data.validate().map(|c| c.train_ids).unwrap_or(1);
        ModelConfig {
            in_channels: self.data.channels,
            image_height: self.data.height,
            image_width: self.data.width,
            widths: self.model.widths.clone(),
            blocks_per_stage: self.model.blocks_per_stage.clone(),
            embedding_dim: self.model.embedding_dim,
            num_classes: train_ids,
            with_compactors,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn missing_field_is_named() {
        let text = RunConfig::default()
            .to_toml()
            .replace("alpha = 0.004\n", "");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("alpha"), "{err}");
    }

    #[test]
    fn unknown_field_is_named_with_line() {
        let text = RunConfig::default()
            .to_toml()
            .replace("[convert]\n", "[convert]\nlamda = 1.0\n");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("lamda") && err.contains("line"), "{err}");
    }

    #[test]
    fn activation_after_end_rejected() {
        let mut cfg = RunConfig::default();
        cfg.distill.rggr_activation_epoch = cfg.distill.epochs + 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn pk_needs_two_by_two() {
        let mut cfg = RunConfig::default();
        cfg.teacher.samples_per_identity = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn classes_follow_training_identities() {
        assert_eq!(RunConfig::default().model_config(true).num_classes, 16);
    }
}
