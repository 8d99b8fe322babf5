use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::generator::check_image_batch;
use super::layers::{global_avg_pool, max_pool_3x3_s2, BatchNorm2d, BnMode, Builder, Conv2d, ConvInit, Linear};
use super::params::{Init, ParamStore};
use crate::error::{Error, Result};

/// Smallest spatial side the classifier accepts; the stem and the three
/// stride-2 stages still leave a non-empty feature map at this size.
pub const CLASSIFIER_MIN_SPATIAL: usize = 8;

const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Channel scale applied to every stage (1.0 = standard ResNet-18).
    pub width_multiplier: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            width_multiplier: 1.0,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::config("width_multiplier", "must be a positive number"));
        }
        Ok(())
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        STAGE_WIDTHS.map(|w| ((w as f64 * self.width_multiplier).round() as usize).max(1))
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let downsample = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(b, &format!("{name}.downsample.0"), c_in, c_out, 1, stride, 0, false, ConvInit::KaimingFanOut)?,
                BatchNorm2d::new(b, &format!("{name}.downsample.1"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(b, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, false, ConvInit::KaimingFanOut)?,
            bn1: BatchNorm2d::new(b, &format!("{name}.bn1"), c_out)?,
            conv2: Conv2d::new(b, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false, ConvInit::KaimingFanOut)?,
            bn2: BatchNorm2d::new(b, &format!("{name}.bn2"), c_out)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

/// ResNet-18 with an N-way head. Parameter names follow the torchvision
/// layout (`conv1`, `bn1`, `layer{1..4}.{0,1}.*`, `fc`), so ImageNet weights
/// exported from torchvision load without renaming.
#[derive(Debug, Clone)]
pub struct ClassifierNet {
    pub config: ClassifierConfig,
    pub num_classes: usize,
    params: ParamStore,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    layers: Vec<BasicBlock>,
    fc: Linear,
}

impl ClassifierNet {
    pub fn new(config: &ClassifierConfig, num_classes: usize, dtype: DType) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::config("n_classes", "must be >= 2"));
        }
        let widths = config.stage_widths();
        let mut params = ParamStore::new();
        let mut init = Init::new(config.seed, dtype);
        let mut b = Builder {
            store: &mut params,
            init: &mut init,
        };
        let conv1 = Conv2d::new(&mut b, "conv1", 3, widths[0], 7, 2, 3, false, ConvInit::KaimingFanOut)?;
        let bn1 = BatchNorm2d::new(&mut b, "bn1", widths[0])?;
        let mut layers = Vec::with_capacity(8);
        let mut c_in = widths[0];
        for (stage, &c_out) in widths.iter().enumerate() {
            let stride = if stage == 0 { 1 } else { 2 };
            let name = format!("layer{}", stage + 1);
            layers.push(BasicBlock::new(&mut b, &format!("{name}.0"), c_in, c_out, stride)?);
            layers.push(BasicBlock::new(&mut b, &format!("{name}.1"), c_out, c_out, 1)?);
            c_in = c_out;
        }
        let fc = Linear::new(&mut b, "fc", c_in, num_classes)?;
        Ok(Self {
            config: config.clone(),
            num_classes,
            params,
            conv1,
            bn1,
            layers,
            fc,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Logits of shape (B, N).
    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        check_image_batch(x, CLASSIFIER_MIN_SPATIAL)?;
        let y = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let mut y = max_pool_3x3_s2(&y)?;
        for block in &self.layers {
            y = block.forward(&y, mode)?;
        }
        self.fc.forward(&global_avg_pool(&y)?)
    }

    /// Names of the final fully connected layer's parameters.
    pub fn head_names(&self) -> impl Iterator<Item = &String> {
        self.params.names().filter(|n| n.starts_with("fc."))
    }
}
