//! Flat key-value run configuration (TOML) with `KEY=VALUE` overrides.
//!
//! Every key is optional; unknown keys are rejected before any work
//! starts. See `configs/` for annotated examples.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, make_folds, synth_dataset, AugmentPolicy, Dataset, FoldSplits, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::PERCEPTUAL_WEIGHT;
use crate::nets::{BundleConfig, PerceptualSource, Precision, TapLayer};
use crate::trainer::{Pipeline, TrainConfig, ValLoss, DEFAULT_LAMBDA_GRID};

/// Environment variable naming the perceptual-weights cache directory.
pub const CACHE_ENV: &str = "FUCIT_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NetPreset {
    /// 5 residual blocks / 64 channels, full-width ResNet-18 and VGG-16.
    #[default]
    Full,
    /// 1 block / 4 channels, 1/16-width ResNet-18, 1/8-width VGG-16.
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualKind {
    #[default]
    Random,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // run
    pub label: String,
    /// Root of `<class>/<image>` folders; a synthetic dataset is generated
    /// when unset.
    pub data_dir: Option<PathBuf>,
    pub image_size: [usize; 2],
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_noise: f64,
    pub n_folds: usize,
    /// Reuse exact splits from a manifest written by an earlier run.
    pub fold_manifest: Option<PathBuf>,
    pub lambdas: Vec<f64>,

    // training
    pub n_classes: Option<usize>,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_clf: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub seed: u64,
    pub fine_tune_only_head: bool,
    pub augment: bool,
    pub hflip_prob: f64,
    pub rotation_degrees: f64,
    pub translate: f64,
    pub shear_degrees: f64,
    pub perceptual_weight: f64,
    pub val_loss: ValLoss,
    pub pipeline: Pipeline,
    pub classifier_weights: Option<PathBuf>,

    // networks
    pub net_preset: NetPreset,
    pub gen_res_blocks: Option<usize>,
    pub gen_channels: Option<usize>,
    pub gen_global_skip: bool,
    pub clf_width: Option<f64>,
    pub perceptual_tap: TapLayer,
    pub perceptual_source: PerceptualKind,
    pub perceptual_weights: Option<PathBuf>,
    pub perceptual_width: Option<f64>,
    pub dtype: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let a = AugmentPolicy::default();
        Self {
            label: String::new(),
            data_dir: None,
            image_size: [32, 32],
            synth_classes: 2,
            synth_per_class: 100,
            synth_noise: 0.05,
            n_folds: 3,
            fold_manifest: None,
            lambdas: DEFAULT_LAMBDA_GRID.to_vec(),
            n_classes: None,
            lambda: t.lambda,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_gen: t.lr_gen,
            lr_clf: t.lr_clf,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_every: t.lr_decay_every,
            weight_decay: t.weight_decay,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            patience: t.patience,
            seed: t.seed,
            fine_tune_only_head: false,
            augment: a.enabled,
            hflip_prob: a.hflip_prob,
            rotation_degrees: a.rotation_degrees,
            translate: a.translate,
            shear_degrees: a.shear_degrees,
            perceptual_weight: PERCEPTUAL_WEIGHT,
            val_loss: ValLoss::default(),
            pipeline: Pipeline::default(),
            classifier_weights: None,
            net_preset: NetPreset::default(),
            gen_res_blocks: None,
            gen_channels: None,
            gen_global_skip: false,
            clf_width: None,
            perceptual_tap: TapLayer::Relu2_2,
            perceptual_source: PerceptualKind::default(),
            perceptual_weights: None,
            perceptual_width: None,
            dtype: Precision::F32,
        }
    }
}

/// Parse `value` as a TOML value; bare words that are not valid TOML are
/// taken as strings, so `data_dir=/tmp/x` works without quotes.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

impl RunConfig {
    /// Merge a TOML document (may be empty) and `KEY=VALUE` overrides.
    pub fn from_sources(toml_text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(toml_text).map_err(|e| Error::config("config", e.message().to_string()))?;
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(Error::config(k.clone(), "config is flat; nested tables are not supported"));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config("override", format!("expected KEY=VALUE, got {o:?}")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(p.to_path_buf()),
                _ => Error::Io(e),
            })?,
            None => String::new(),
        };
        Self::from_sources(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size.contains(&0) {
            return Err(Error::config("image_size", "must be non-zero"));
        }
        if self.n_folds == 0 {
            return Err(Error::config("n_folds", "must be >= 1"));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::config("lambdas", format!("{l} is not a valid weight")));
        }
        if self.perceptual_source == PerceptualKind::Pretrained && self.perceptual_weights.is_none() {
            return Err(Error::config("perceptual_weights", "required when perceptual_source = \"pretrained\""));
        }
        Ok(())
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image_size[0], self.image_size[1])
    }

    /// Load or synthesize the dataset.
    pub fn dataset(&self) -> Result<Dataset> {
        let ds = match &self.data_dir {
            Some(dir) => load_dataset(dir, self.image_size())?,
            None => synth_dataset(
                &SynthSpec {
                    n_classes: self.synth_classes,
                    images_per_class: self.synth_per_class,
                    size: self.image_size(),
                    noise: self.synth_noise,
                },
                self.seed,
            )?,
        };
        if let Some(n) = self.n_classes {
            if n != ds.n_classes() {
                return Err(Error::ClassCount {
                    expected: n,
                    found: ds.n_classes(),
                });
            }
        }
        Ok(ds)
    }

    pub fn folds(&self, ds: &Dataset) -> Result<FoldSplits> {
        match &self.fold_manifest {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|_| Error::MissingFile(p.clone()))?;
                FoldSplits::from_manifest(&text, ds)
            }
            None => make_folds(ds, self.n_folds, self.seed),
        }
    }

    pub fn train_config(&self, n_classes: usize) -> TrainConfig {
        TrainConfig {
            n_classes,
            lambda: self.lambda,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_gen: self.lr_gen,
            lr_clf: self.lr_clf,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            weight_decay: self.weight_decay,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            patience: self.patience,
            seed: self.seed,
            fine_tune_only_head: self.fine_tune_only_head,
            augment: AugmentPolicy {
                enabled: self.augment,
                hflip_prob: self.hflip_prob,
                rotation_degrees: self.rotation_degrees,
                translate: self.translate,
                shear_degrees: self.shear_degrees,
            },
            perceptual_weight: self.perceptual_weight,
            val_loss: self.val_loss,
            pipeline: self.pipeline,
            classifier_weights: self.classifier_weights.clone(),
        }
    }

    pub fn bundle_config(&self, n_classes: usize) -> BundleConfig {
        let mut b = match self.net_preset {
            NetPreset::Full => BundleConfig::new(n_classes, self.seed),
            NetPreset::Micro => BundleConfig::micro(n_classes, self.seed),
        };
        if let Some(v) = self.gen_res_blocks {
            b.generator.num_res_blocks = v;
        }
        if let Some(v) = self.gen_channels {
            b.generator.base_channels = v;
        }
        b.generator.use_global_skip = self.gen_global_skip;
        if let Some(v) = self.clf_width {
            b.classifier.width_multiplier = v;
        }
        if let Some(v) = self.perceptual_width {
            b.perceptual.width_multiplier = v;
        }
        b.perceptual.tap_layer = self.perceptual_tap;
        b.perceptual.source = match (&self.perceptual_source, &self.perceptual_weights) {
            (PerceptualKind::Pretrained, Some(path)) => PerceptualSource::PretrainedFile { path: path.clone() },
            _ => PerceptualSource::FixedSeedRandom { seed: self.seed },
        };
        b.precision = self.dtype;
        b
    }
}

/// Perceptual cache directory from the environment, if set.
pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::from_sources("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn file_then_overrides() {
        let text = "lambda = 0.1\nepochs = 7\nnet_preset = \"micro\"\n";
        let c = RunConfig::from_sources(text, &["lambda=0.05".into(), "data_dir=/tmp/x y".into()]).unwrap();
        assert_eq!(c.lambda, 0.05);
        assert_eq!(c.epochs, 7);
        assert_eq!(c.net_preset, NetPreset::Micro);
        assert_eq!(c.data_dir, Some(PathBuf::from("/tmp/x y")));
        let c = RunConfig::from_sources("", &["lambdas=[0.01, 0.5]".into(), "image_size=[8, 8]".into()]).unwrap();
        assert_eq!(c.lambdas, vec![0.01, 0.5]);
        assert_eq!(c.image_size(), (8, 8));
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        let e = RunConfig::from_sources("lamda = 0.1", &[]).unwrap_err();
        assert!(e.to_string().contains("lamda"), "{e}");
        let e = RunConfig::from_sources("", &["batch_sise=3".into()]).unwrap_err();
        assert!(e.to_string().contains("batch_sise"), "{e}");
        assert!(RunConfig::from_sources("", &["epochs".into()]).is_err());
        assert!(RunConfig::from_sources("[train]\nlambda = 1.0", &[]).is_err());
        assert!(RunConfig::from_sources("", &["epochs=\"many\"".into()]).is_err());
        assert!(RunConfig::from_sources("", &["lambdas=[-1.0]".into()]).is_err());
    }

    #[test]
    fn enums_by_name() {
        let c = RunConfig::from_sources(
            "pipeline = \"classifier_only\"\nval_loss = \"fused\"\nperceptual_tap = \"relu3_3\"\ndtype = \"f64\"",
            &[],
        )
        .unwrap();
        assert_eq!(c.pipeline, Pipeline::ClassifierOnly);
        assert_eq!(c.val_loss, ValLoss::Fused);
        let b = c.bundle_config(2);
        assert_eq!(b.perceptual.tap_layer, TapLayer::Relu3_3);
        assert_eq!(b.precision, Precision::F64);
    }

    #[test]
    fn seed_reaches_everything() {
        let c = RunConfig::from_sources("", &["seed=9".into(), "net_preset=\"micro\"".into()]).unwrap();
        assert_eq!(c.train_config(2).seed, 9);
        assert_eq!(c.bundle_config(2).seed, 9);
        let a = c.dataset().unwrap();
        let b = RunConfig { seed: 10, ..c.clone() }.dataset().unwrap();
        assert_ne!(a.samples[0].pixels, b.samples[0].pixels);
        assert_eq!(c.folds(&a).unwrap().seed, 9);
    }

    #[test]
    fn n_classes_checked_against_data() {
        let c = RunConfig::from_sources("", &["n_classes=3".into()]).unwrap();
        assert!(matches!(c.dataset(), Err(Error::ClassCount { expected: 3, found: 2 })));
    }
}
