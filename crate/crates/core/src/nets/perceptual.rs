//! Frozen VGG-16 feature extractor used by the perceptual similarity term.
//!
//! Parameters are held as plain tensors rather than [`candle_core::Var`]s:
//! gradients flow through the extractor into its input but there is nothing
//! in here an optimizer could ever update.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::generator::check_image_batch;
use super::layers::{conv2d, max_pool_2x2};
use super::params::Init;
use crate::error::{Error, Result};

/// VGG-16 `features` layout: channel counts with `0` marking a 2x2 max pool.
const VGG16: [usize; 18] = [
    64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0,
];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Which activation map is tapped. Each is the ReLU output of the last
/// convolution in a stage, before that stage's pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapLayer {
    Relu1_2,
    Relu2_2,
    Relu3_3,
    Relu4_3,
    Relu5_3,
}

impl TapLayer {
    pub const ALL: [TapLayer; 5] = [
        TapLayer::Relu1_2,
        TapLayer::Relu2_2,
        TapLayer::Relu3_3,
        TapLayer::Relu4_3,
        TapLayer::Relu5_3,
    ];

    /// Number of convolutions (with ReLU) up to and including the tap.
    fn conv_count(self) -> usize {
        match self {
            TapLayer::Relu1_2 => 2,
            TapLayer::Relu2_2 => 4,
            TapLayer::Relu3_3 => 7,
            TapLayer::Relu4_3 => 10,
            TapLayer::Relu5_3 => 13,
        }
    }

    /// Pooling stages passed before the tap.
    pub fn downsample_steps(self) -> usize {
        self as usize
    }

    /// Channel count of the tapped map at full width.
    pub fn full_channels(self) -> usize {
        [64, 128, 256, 512, 512][self as usize]
    }

    /// Index of this activation in torchvision's `vgg16().features`.
    pub fn torchvision_index(self) -> usize {
        [3, 8, 15, 22, 29][self as usize]
    }

    pub fn name(self) -> &'static str {
        ["relu1_2", "relu2_2", "relu3_3", "relu4_3", "relu5_3"][self as usize]
    }
}

impl FromStr for TapLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TapLayer::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config("perceptual_tap", format!("unknown tap layer {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerceptualSource {
    /// Torchvision-layout VGG-16 weights (`features.{i}.weight|bias`) in a
    /// safetensors file.
    PretrainedFile { path: PathBuf },
    FixedSeedRandom { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    pub tap_layer: TapLayer,
    pub source: PerceptualSource,
    /// Channel scale; pretrained weights require 1.0.
    pub width_multiplier: f64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            tap_layer: TapLayer::Relu2_2,
            source: PerceptualSource::FixedSeedRandom { seed: 0 },
            width_multiplier: 1.0,
        }
    }
}

impl PerceptualConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::config("perceptual_width", "must be a positive number"));
        }
        if matches!(self.source, PerceptualSource::PretrainedFile { .. }) && self.width_multiplier != 1.0 {
            return Err(Error::config("perceptual_width", "pretrained weights need width 1.0"));
        }
        Ok(())
    }

    fn width(&self, full: usize) -> usize {
        ((full as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// Feature shape (C_j, H_j, W_j) produced for an `h` x `w` input.
    pub fn feature_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let s = self.tap_layer.downsample_steps();
        (self.width(self.tap_layer.full_channels()), h >> s, w >> s)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Conv { weight: Tensor, bias: Tensor },
    Pool,
}

#[derive(Debug, Clone)]
pub struct PerceptualNet {
    pub config: PerceptualConfig,
    ops: Vec<Op>,
    mean: Tensor,
    std: Tensor,
}

impl PerceptualNet {
    /// Build the extractor. A relative pretrained path is resolved against
    /// `cache_dir` when given.
    pub fn new(config: &PerceptualConfig, dtype: DType, cache_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(config);
        let ops = match &config.source {
            PerceptualSource::FixedSeedRandom { seed } => {
                let mut init = Init::new(*seed, dtype);
                let mut c_in = 3;
                let mut ops = Vec::new();
                for &(_, c) in &layout {
                    match c {
                        0 => ops.push(Op::Pool),
                        c_out => {
                            let fan_in = (c_in * 9) as f64;
                            ops.push(Op::Conv {
                                weight: init.normal(&[c_out, c_in, 3, 3], (2.0 / fan_in).sqrt())?,
                                bias: init.constant(&[c_out], 0.0)?,
                            });
                            c_in = c_out;
                        }
                    }
                }
                ops
            }
            PerceptualSource::PretrainedFile { path } => {
                let path = match cache_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                if !path.exists() {
                    return Err(Error::MissingFile(path));
                }
                let tensors = candle_core::safetensors::load(&path, &Device::Cpu)?;
                let get = |name: String, shape: &[usize]| -> Result<Tensor> {
                    let t = tensors.get(&name).ok_or_else(|| Error::Checkpoint {
                        path: path.clone(),
                        reason: format!("missing tensor {name}"),
                    })?;
                    if t.dims() != shape {
                        return Err(Error::Checkpoint {
                            path: path.clone(),
                            reason: format!("{name}: expected {shape:?}, got {:?}", t.dims()),
                        });
                    }
                    Ok(t.to_dtype(dtype)?)
                };
                let mut c_in = 3;
                let mut ops = Vec::new();
                for &(idx, c) in &layout {
                    match c {
                        0 => ops.push(Op::Pool),
                        c_out => {
                            ops.push(Op::Conv {
                                weight: get(format!("features.{idx}.weight"), &[c_out, c_in, 3, 3])?,
                                bias: get(format!("features.{idx}.bias"), &[c_out])?,
                            });
                            c_in = c_out;
                        }
                    }
                }
                ops
            }
        };
        let dev = Device::Cpu;
        Ok(Self {
            config: config.clone(),
            ops,
            mean: Tensor::from_slice(&IMAGENET_MEAN, (1, 3, 1, 1), &dev)?.to_dtype(dtype)?,
            std: Tensor::from_slice(&IMAGENET_STD, (1, 3, 1, 1), &dev)?.to_dtype(dtype)?,
        })
    }

    /// (torchvision feature index, channels or 0 for pool) up to the tap.
    fn layout(config: &PerceptualConfig) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut convs = 0;
        let mut idx = 0;
        for &c in VGG16.iter() {
            if convs == config.tap_layer.conv_count() {
                break;
            }
            if c == 0 {
                out.push((idx, 0));
                idx += 1;
            } else {
                out.push((idx, config.width(c)));
                convs += 1;
                idx += 2; // conv + relu
            }
        }
        out
    }

    /// Features of shape (B, C_j, H_j, W_j).
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        check_image_batch(x, 1 << self.config.tap_layer.downsample_steps())?;
        let mut y = x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        for op in &self.ops {
            y = match op {
                Op::Conv { weight, bias } => conv2d(&y, weight, 1, 1)?
                    .broadcast_add(&bias.reshape((1, (), 1, 1))?)?
                    .relu()?,
                Op::Pool => max_pool_2x2(&y)?,
            };
        }
        Ok(y)
    }

    /// Named copies of every frozen tensor, in torchvision naming.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let layout = Self::layout(&self.config);
        let mut out = BTreeMap::new();
        for ((idx, _), op) in layout.iter().zip(&self.ops) {
            if let Op::Conv { weight, bias } = op {
                out.insert(format!("features.{idx}.weight"), weight.clone());
                out.insert(format!("features.{idx}.bias"), bias.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_names_round_trip() {
        for t in TapLayer::ALL {
            assert_eq!(t.name().parse::<TapLayer>().unwrap(), t);
        }
        assert!("relu9_9".parse::<TapLayer>().is_err());
    }

    #[test]
    fn layout_indices_follow_torchvision() {
        let cfg = PerceptualConfig {
            tap_layer: TapLayer::Relu5_3,
            ..Default::default()
        };
        let convs: Vec<usize> = PerceptualNet::layout(&cfg)
            .into_iter()
            .filter(|(_, c)| *c > 0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(convs, vec![0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28]);
        for t in TapLayer::ALL {
            let cfg = PerceptualConfig { tap_layer: t, ..Default::default() };
            let (last, _) = *PerceptualNet::layout(&cfg).last().unwrap();
            assert_eq!(last + 1, t.torchvision_index());
        }
    }

    #[test]
    fn missing_pretrained_file_names_path() {
        let cfg = PerceptualConfig {
            source: PerceptualSource::PretrainedFile {
                path: "no/such/vgg16.safetensors".into(),
            },
            ..Default::default()
        };
        let err = PerceptualNet::new(&cfg, DType::F32, None).unwrap_err();
        assert!(err.to_string().contains("no/such/vgg16.safetensors"));
    }

    #[test]
    fn features_are_deterministic() {
        let cfg = PerceptualConfig {
            width_multiplier: 0.125,
            ..Default::default()
        };
        let net = PerceptualNet::new(&cfg, DType::F64, None).unwrap();
        let x = Tensor::rand(0f64, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let a: Vec<f64> = net.features(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = net.features(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        assert_eq!(net.features(&x).unwrap().dims(), &[2, 16, 8, 8]);
    }
}
