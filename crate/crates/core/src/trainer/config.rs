use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::schedule::step_decay;
use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::losses::PERCEPTUAL_WEIGHT;
use crate::nets::OptimSettings;
use crate::optim::AdamConfig;

/// The 13 routed-loss weights evaluated by [`lambda_sweep`](super::lambda_sweep).
pub const DEFAULT_LAMBDA_GRID: [f64; 13] = [
    1.0, 0.5, 0.1, 0.075, 0.05, 0.025, 0.01, 0.0075, 0.005, 0.0025, 0.001, 0.00075, 0.0005,
];

/// Which loss drives early stopping and best-checkpoint selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValLoss {
    /// Classifier cross-entropy summed over all N streams.
    #[default]
    Streams,
    /// Cross-entropy of the fused scores (per class, the max over streams).
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Generators + classifier, fused at inference.
    #[default]
    Fused,
    /// Classifier alone on untransformed images (reference baseline).
    ClassifierOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_classes: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_clf: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Classifier only; generators use none.
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub seed: u64,
    pub fine_tune_only_head: bool,
    pub augment: AugmentPolicy,
    pub perceptual_weight: f64,
    pub val_loss: ValLoss,
    pub pipeline: Pipeline,
    /// Optional ImageNet-layout ResNet-18 weights loaded into every fresh
    /// classifier.
    pub classifier_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_classes: 2,
            lambda: 0.05,
            epochs: 100,
            batch_size: 32,
            lr_gen: 1e-4,
            lr_clf: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_every: 5,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            patience: 10,
            seed: 0,
            fine_tune_only_head: false,
            augment: AugmentPolicy::default(),
            perceptual_weight: PERCEPTUAL_WEIGHT,
            val_loss: ValLoss::Streams,
            pipeline: Pipeline::Fused,
            classifier_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_gen", self.lr_gen),
            ("lr_clf", self.lr_clf),
            ("lr_decay_factor", self.lr_decay_factor),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, format!("must be > 0, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(name, format!("must be in [0, 1), got {v}")));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be finite and >= 0"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if !(self.perceptual_weight.is_finite() && self.perceptual_weight >= 0.0) {
            return Err(Error::config("perceptual_weight", "must be >= 0"));
        }
        if self.patience < 1 {
            return Err(Error::config("patience", "must be >= 1"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.lr_decay_every < 1 {
            return Err(Error::config("lr_decay_every", "must be >= 1"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "must be >= 2"));
        }
        Ok(())
    }

    /// Classifier learning rate for a 0-based epoch.
    pub fn lr_schedule(&self, epoch: usize) -> f64 {
        step_decay(self.lr_clf, self.lr_decay_factor, self.lr_decay_every, epoch)
    }

    pub fn optim_settings(&self) -> OptimSettings {
        OptimSettings {
            generator: AdamConfig {
                lr: self.lr_gen,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
                weight_decay: 0.0,
            },
            classifier: AdamConfig {
                lr: self.lr_clf,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            head_only: self.fine_tune_only_head,
        }
    }
}
