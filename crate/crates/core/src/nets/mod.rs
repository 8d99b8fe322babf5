//! The three network families: per-class generators, the ResNet-18
//! classifier and the frozen VGG-16 perceptual extractor, plus the bundle
//! that owns them and its checkpoint format.

pub mod bundle;
pub mod checkpoint;
pub mod classifier;
pub mod generator;
pub mod layers;
pub mod params;
pub mod perceptual;

pub use bundle::{BundleConfig, BundleSnapshot, ModelBundle, OptimSettings, Precision, RunInfo};
pub use checkpoint::{load_pretrained_classifier, load_weights, read_meta, save_weights, CheckpointMeta};
pub use classifier::{ClassifierConfig, ClassifierNet, CLASSIFIER_MIN_SPATIAL};
pub use generator::{GeneratorConfig, GeneratorNet, GENERATOR_MIN_SPATIAL};
pub use layers::BnMode;
pub use params::{ParamKind, ParamStore};
pub use perceptual::{PerceptualConfig, PerceptualNet, PerceptualSource, TapLayer};
