//! Datasets, fold splits, augmentation and synthetic fixtures.

mod augment;
mod folds;
mod loader;
mod synth;

use std::path::PathBuf;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};

pub use augment::{augment, AugmentPolicy};
pub use folds::{make_folds, Fold, FoldSplits, Split};
pub use loader::{load_dataset, read_image};
pub use synth::{synth_dataset, SynthSpec};

use crate::error::{Error, Result};

/// One image, stored channel-major (3 x H x W) with values in [0, 1].
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    pub label: usize,
    pub path: Option<PathBuf>,
    pub pixels: Arc<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    /// (H, W)
    pub image_size: (usize, usize),
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        for s in &self.samples {
            if s.label >= self.n_classes() {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    n_classes: self.n_classes(),
                });
            }
            if s.pixels.len() != 3 * h * w {
                return Err(Error::Data(format!("{} has the wrong pixel count", s.image_id)));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, image_id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.image_id == image_id)
    }

    /// Per-class sample indices.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes()];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label].push(i);
        }
        out
    }

    /// Stack the given samples into a (B, 3, H, W) tensor.
    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<Tensor> {
        let images: Vec<&[f32]> = indices.iter().map(|&i| self.samples[i].pixels.as_slice()).collect();
        stack_images(&images, self.image_size, dtype)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }

    pub fn ids(&self, indices: &[usize]) -> Vec<String> {
        indices.iter().map(|&i| self.samples[i].image_id.clone()).collect()
    }
}

pub fn stack_images(images: &[&[f32]], (h, w): (usize, usize), dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        data.extend_from_slice(img);
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}
