use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::classifier::{ClassifierConfig, ClassifierNet};
use super::generator::{GeneratorConfig, GeneratorNet};
use super::perceptual::{PerceptualConfig, PerceptualNet};
use super::params::derive_seed;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Architecture of a full system. Its digest guards checkpoint loads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub n_classes: usize,
    /// Template for every generator; the per-generator seed is derived from
    /// `seed` and the class index.
    pub generator: GeneratorConfig,
    pub classifier: ClassifierConfig,
    pub perceptual: PerceptualConfig,
    pub precision: Precision,
    pub seed: u64,
}

impl BundleConfig {
    pub fn new(n_classes: usize, seed: u64) -> Self {
        Self {
            n_classes,
            generator: GeneratorConfig::default(),
            classifier: ClassifierConfig::default(),
            perceptual: PerceptualConfig::default(),
            precision: Precision::F32,
            seed,
        }
    }

    /// The architecture used throughout the test-suite: one residual block
    /// with 4 channels, a 1/16-width ResNet-18 and a 1/8-width VGG-16 stem.
    pub fn micro(n_classes: usize, seed: u64) -> Self {
        Self {
            generator: GeneratorConfig {
                num_res_blocks: 1,
                base_channels: 4,
                ..Default::default()
            },
            classifier: ClassifierConfig {
                width_multiplier: 1.0 / 16.0,
                seed: 0,
            },
            perceptual: PerceptualConfig {
                width_multiplier: 1.0 / 8.0,
                ..Default::default()
            },
            ..Self::new(n_classes, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "must be >= 2"));
        }
        self.generator.validate()?;
        self.classifier.validate()?;
        self.perceptual.validate()
    }

    /// Hex SHA-256 of the canonical JSON encoding with the seed cleared, so
    /// runs that differ only in their seed share a digest.
    pub fn digest(&self) -> String {
        let unseeded = Self { seed: 0, ..self.clone() };
        let json = serde_json::to_string(&unseeded).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn generator_config(&self, k: usize) -> GeneratorConfig {
        GeneratorConfig {
            seed: derive_seed(self.seed, &format!("generator.{k}")),
            ..self.generator.clone()
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            seed: derive_seed(self.seed, "classifier"),
            ..self.classifier.clone()
        }
    }
}

/// Optimizer settings applied when a bundle is created.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimSettings {
    pub generator: AdamConfig,
    pub classifier: AdamConfig,
    /// Only the final fully connected layer of the classifier is trained.
    pub head_only: bool,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            generator: AdamConfig {
                lr: 1e-4,
                ..Default::default()
            },
            classifier: AdamConfig {
                lr: 1e-3,
                weight_decay: 1e-4,
                ..Default::default()
            },
            head_only: false,
        }
    }
}

/// Training/run metadata stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunInfo {
    pub lambda: f64,
    pub epoch: usize,
    pub val_loss: Option<f64>,
}

/// Copy of every generator and classifier tensor (buffers included).
#[derive(Debug, Clone)]
pub struct BundleSnapshot {
    generators: Vec<BTreeMap<String, Tensor>>,
    classifier: BTreeMap<String, Tensor>,
    info: RunInfo,
}

/// N generators, one classifier, the frozen perceptual extractor and all
/// optimizer state.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: BundleConfig,
    pub generators: Vec<GeneratorNet>,
    pub classifier: ClassifierNet,
    pub perceptual: PerceptualNet,
    pub gen_opts: Vec<Adam>,
    pub clf_opt: Adam,
    pub info: RunInfo,
}

impl ModelBundle {
    pub fn new(config: &BundleConfig, optim: &OptimSettings, cache_dir: Option<&std::path::Path>) -> Result<Self> {
        config.validate()?;
        let dtype = config.precision.dtype();
        let generators = (0..config.n_classes)
            .map(|k| GeneratorNet::new(&config.generator_config(k), k, dtype))
            .collect::<Result<Vec<_>>>()?;
        let classifier = ClassifierNet::new(&config.classifier_config(), config.n_classes, dtype)?;
        let perceptual = PerceptualNet::new(&config.perceptual, dtype, cache_dir)?;
        let gen_opts = generators
            .iter()
            .map(|g| Adam::new(optim.generator, g.params().trainable()))
            .collect();
        let clf_opt = if optim.head_only {
            Adam::new(
                optim.classifier,
                classifier.params().trainable().filter(|(n, _)| n.starts_with("fc.")),
            )
        } else {
            Adam::new(optim.classifier, classifier.params().trainable())
        };
        Ok(Self {
            config: config.clone(),
            generators,
            classifier,
            perceptual,
            gen_opts,
            clf_opt,
            info: RunInfo::default(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    pub fn snapshot(&self) -> Result<BundleSnapshot> {
        Ok(BundleSnapshot {
            generators: self.generators.iter().map(|g| g.params().snapshot()).collect::<Result<_>>()?,
            classifier: self.classifier.params().snapshot()?,
            info: self.info,
        })
    }

    /// Restore network weights; optimizer state is left untouched.
    pub fn restore(&mut self, snap: &BundleSnapshot) -> Result<()> {
        for (g, s) in self.generators.iter().zip(&snap.generators) {
            g.params().restore(s)?;
        }
        self.classifier.params().restore(&snap.classifier)?;
        self.info = snap.info;
        Ok(())
    }
}
