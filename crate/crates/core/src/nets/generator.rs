use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, BnMode, Builder, Conv2d, ConvInit, PRelu};
use super::params::{Init, ParamStore};
use crate::error::{Error, Result};

/// Smallest spatial side a generator accepts.
pub const GENERATOR_MIN_SPATIAL: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_res_blocks: usize,
    pub base_channels: usize,
    /// Add the input image to the raw output.
    pub use_global_skip: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_res_blocks: 5,
            base_channels: 64,
            use_global_skip: false,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_res_blocks < 1 {
            return Err(Error::config("num_res_blocks", "must be >= 1"));
        }
        if self.base_channels < 1 {
            return Err(Error::config("base_channels", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    act: PRelu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, mode)?;
        let y = self.act.forward(&y)?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?;
        Ok((y + x)?)
    }
}

/// Image-to-image transformation network for one class.
///
/// Layout: `head` (3 -> C conv 3x3 + PReLU), `blocks.{i}` residual blocks,
/// `tail` (C -> 3 conv 3x3). All convolutions use same padding, so the
/// output always has the input's shape.
#[derive(Debug, Clone)]
pub struct GeneratorNet {
    pub config: GeneratorConfig,
    pub class_index: usize,
    params: ParamStore,
    head: Conv2d,
    head_act: PRelu,
    blocks: Vec<ResBlock>,
    tail: Conv2d,
}

impl GeneratorNet {
    pub fn new(config: &GeneratorConfig, class_index: usize, dtype: DType) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let mut params = ParamStore::new();
        let mut init = Init::new(config.seed, dtype);
        let mut b = Builder {
            store: &mut params,
            init: &mut init,
        };
        let head = Conv2d::new(&mut b, "head", 3, c, 3, 1, 1, true, ConvInit::Default)?;
        let head_act = PRelu::new(&mut b, "head_act")?;
        let blocks = (0..config.num_res_blocks)
            .map(|i| {
                let p = format!("blocks.{i}");
                Ok(ResBlock {
                    conv1: Conv2d::new(&mut b, &format!("{p}.conv1"), c, c, 3, 1, 1, true, ConvInit::Default)?,
                    bn1: BatchNorm2d::new(&mut b, &format!("{p}.bn1"), c)?,
                    act: PRelu::new(&mut b, &format!("{p}.act"))?,
                    conv2: Conv2d::new(&mut b, &format!("{p}.conv2"), c, c, 3, 1, 1, true, ConvInit::Default)?,
                    bn2: BatchNorm2d::new(&mut b, &format!("{p}.bn2"), c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tail = Conv2d::new(&mut b, "tail", c, 3, 3, 1, 1, true, ConvInit::Default)?;
        Ok(Self {
            config: config.clone(),
            class_index,
            params,
            head,
            head_act,
            blocks,
            tail,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        check_image_batch(x, GENERATOR_MIN_SPATIAL)?;
        let mut y = self.head_act.forward(&self.head.forward(x)?)?;
        for block in &self.blocks {
            y = block.forward(&y, mode)?;
        }
        let out = self.tail.forward(&y)?;
        if self.config.use_global_skip {
            Ok((out + x)?)
        } else {
            Ok(out)
        }
    }
}

/// Reject anything that is not (B, 3, H, W) with H, W >= `min_spatial`.
pub(crate) fn check_image_batch(x: &Tensor, min_spatial: usize) -> Result<()> {
    let dims = x.dims();
    if dims.len() != 4 || dims[1] != 3 {
        return Err(Error::Shape(format!(
            "expected (batch, 3, H, W) image batch, got {dims:?}"
        )));
    }
    if dims[2] < min_spatial || dims[3] < min_spatial {
        return Err(Error::SpatialTooSmall {
            min: min_spatial,
            got_h: dims[2],
            got_w: dims[3],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn micro(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            num_res_blocks: 1,
            base_channels: 4,
            use_global_skip: false,
            seed,
        }
    }

    #[test]
    fn preserves_shape() {
        let g = GeneratorNet::new(&micro(1), 0, DType::F32).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(g.forward(&x, BnMode::Train).unwrap().dims(), &[2, 3, 8, 8]);
        let x = Tensor::rand(0f32, 1.0, (1, 3, 11, 9), &Device::Cpu).unwrap();
        assert_eq!(g.forward(&x, BnMode::Eval).unwrap().dims(), &[1, 3, 11, 9]);
    }

    #[test]
    fn full_size_preserves_shape() {
        let g = GeneratorNet::new(&GeneratorConfig::default(), 0, DType::F32).unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
        assert_eq!(g.forward(&x, BnMode::Train).unwrap().dims(), &[1, 3, 64, 64]);
        assert_eq!(g.params().names().filter(|n| n.starts_with("blocks.")).count(), 5 * 15);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = GeneratorNet::new(&micro(9), 0, DType::F64).unwrap();
        let b = GeneratorNet::new(&micro(9), 0, DType::F64).unwrap();
        let c = GeneratorNet::new(&micro(10), 0, DType::F64).unwrap();
        let mut differs = false;
        for ((na, ea), (nb, eb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(na, nb);
            let va: Vec<f64> = ea.var.flatten_all().unwrap().to_vec1().unwrap();
            let vb: Vec<f64> = eb.var.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(va, vb);
            let vc: Vec<f64> = c.params().get(na).unwrap().var.flatten_all().unwrap().to_vec1().unwrap();
            differs |= va != vc;
        }
        assert!(differs);
    }

    #[test]
    fn rejects_bad_config_and_input() {
        let err = GeneratorNet::new(&GeneratorConfig { num_res_blocks: 0, ..micro(0) }, 0, DType::F32)
            .unwrap_err();
        assert!(err.to_string().contains("num_res_blocks"));
        let err = GeneratorNet::new(&GeneratorConfig { base_channels: 0, ..micro(0) }, 0, DType::F32)
            .unwrap_err();
        assert!(err.to_string().contains("base_channels"));
        let g = GeneratorNet::new(&micro(0), 0, DType::F32).unwrap();
        let x = Tensor::zeros((1, 1, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(g.forward(&x, BnMode::Eval), Err(Error::Shape(_))));
        let x = Tensor::zeros((1, 3, 4, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(g.forward(&x, BnMode::Eval), Err(Error::SpatialTooSmall { min: 8, .. })));
    }

    #[test]
    fn zero_tail_with_skip_is_identity() {
        let cfg = GeneratorConfig {
            use_global_skip: true,
            ..micro(2)
        };
        let g = GeneratorNet::new(&cfg, 1, DType::F64).unwrap();
        for (name, e) in g.params().iter() {
            if name.starts_with("tail.") {
                e.var.set(&e.var.zeros_like().unwrap()).unwrap();
            }
        }
        let x = Tensor::rand(0f64, 1.0, (3, 3, 8, 8), &Device::Cpu).unwrap();
        let y = g.forward(&x, BnMode::Train).unwrap();
        let a: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_order_preserved() {
        let g = GeneratorNet::new(&micro(3), 0, DType::F64).unwrap();
        let x = Tensor::rand(0f64, 1.0, (4, 3, 8, 8), &Device::Cpu).unwrap();
        let y = g.forward(&x, BnMode::Eval).unwrap();
        for i in 0..4 {
            let yi = g.forward(&x.narrow(0, i, 1).unwrap(), BnMode::Eval).unwrap();
            let d = (yi - y.narrow(0, i, 1).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
            assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
        }
    }
}
