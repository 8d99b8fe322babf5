//! Minimal layer set on top of candle tensors.

use candle_core::{DType, Tensor, Var, D};

use super::params::{Init, ParamKind, ParamStore};
use crate::error::Result;

/// How batch normalization treats statistics during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics untouched. Used for the network
    /// that is held fixed during the other network's update.
    BatchStats,
    /// Running statistics.
    Eval,
}

pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub init: &'a mut Init,
}

impl Builder<'_> {
    fn register(&mut self, name: String, t: Tensor, kind: ParamKind) -> Result<Var> {
        let var = Var::from_tensor(&t)?;
        self.store.insert(name, var.clone(), kind);
        Ok(var)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum ConvInit {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    Default,
    /// N(0, 2/fan_out), the ResNet convention.
    KaimingFanOut,
}

/// `x.conv2d(weight, padding, stride, 1, 1)`, safe for every input shape.
///
/// candle-core 0.9's CPU kernel treats its input as channels-last whenever
/// the strides equal those of a contiguous (B, H, W, C) array. A contiguous
/// (B, C, H, W) input with C == H == W has exactly those strides and is read
/// in the wrong order. In that case the input is handed over as a genuine
/// channels-last view, which takes the kernel's general copy path.
pub fn conv2d(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let x = if c > 1 && c == h && c == w {
        x.permute((0, 2, 3, 1))?.contiguous()?.permute((0, 3, 1, 2))?
    } else {
        x.clone()
    };
    Ok(x.conv2d(weight, padding, stride, 1, 1)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: ConvInit,
    ) -> Result<Self> {
        let shape = [c_out, c_in, kernel, kernel];
        let fan_in = (c_in * kernel * kernel) as f64;
        let fan_out = (c_out * kernel * kernel) as f64;
        let w = match init {
            ConvInit::Default => b.init.uniform(&shape, 1.0 / fan_in.sqrt())?,
            ConvInit::KaimingFanOut => b.init.normal(&shape, (2.0 / fan_out).sqrt())?,
        };
        let weight = b.register(format!("{name}.weight"), w, ParamKind::Trainable)?;
        let bias = if bias {
            let t = b.init.uniform(&[c_out], 1.0 / fan_in.sqrt())?;
            Some(b.register(format!("{name}.bias"), t, ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), self.padding, self.stride)?;
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    num_batches_tracked: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub(crate) fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        let weight = b.register(
            format!("{name}.weight"),
            b.init.constant(&[channels], 1.0)?,
            ParamKind::Trainable,
        )?;
        let bias = b.register(
            format!("{name}.bias"),
            b.init.constant(&[channels], 0.0)?,
            ParamKind::Trainable,
        )?;
        let running_mean = b.register(
            format!("{name}.running_mean"),
            b.init.constant(&[channels], 0.0)?,
            ParamKind::Buffer,
        )?;
        let running_var = b.register(
            format!("{name}.running_var"),
            b.init.constant(&[channels], 1.0)?,
            ParamKind::Buffer,
        )?;
        let num_batches_tracked = b.register(
            format!("{name}.num_batches_tracked"),
            b.init.constant(&[], 0.0)?,
            ParamKind::Buffer,
        )?;
        Ok(Self {
            weight,
            bias,
            running_mean,
            running_var,
            num_batches_tracked,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = match mode {
            BnMode::Eval => (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            ),
            BnMode::Train | BnMode::BatchStats => {
                let mean = x.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered
                    .sqr()?
                    .mean_keepdim(3)?
                    .mean_keepdim(2)?
                    .mean_keepdim(0)?;
                if mode == BnMode::Train {
                    let n = (b * h * w) as f64;
                    let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                    // Cumulative average over the first batches, then the
                    // usual exponential average. Running statistics start
                    // at (0, 1), far from the real ones for small
                    // activations, and a short run would otherwise evaluate
                    // with statistics that are mostly initial value.
                    let seen = self.num_batches_tracked.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                    let m = self.momentum.max(1.0 / (seen + 1.0));
                    let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                        + (mean.detach().flatten_all()? * m)?)?;
                    let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                        + (var.detach().flatten_all()? * (m * unbiased))?)?;
                    self.running_mean.set(&new_mean)?;
                    self.running_var.set(&new_var)?;
                    self.num_batches_tracked
                        .set(&(self.num_batches_tracked.as_tensor().detach() + 1.0)?)?;
                }
                (mean, var)
            }
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&inv_std)?;
        let y = y
            .broadcast_mul(&self.weight.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?;
        Ok(y)
    }
}

/// Parametric rectifier with a single learned slope.
#[derive(Debug, Clone)]
pub struct PRelu {
    slope: Var,
}

impl PRelu {
    pub(crate) fn new(b: &mut Builder, name: &str) -> Result<Self> {
        let slope = b.register(
            format!("{name}.weight"),
            b.init.constant(&[1], 0.25)?,
            ParamKind::Trainable,
        )?;
        Ok(Self { slope })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // max(0, x) + a * min(0, x)
        let pos = x.relu()?;
        let neg = (x - &pos)?;
        let slope = self.slope.as_tensor().reshape((1, 1, 1, 1))?;
        Ok((pos + neg.broadcast_mul(&slope)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub(crate) fn new(b: &mut Builder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = b.init.uniform(&[d_out, d_in], bound)?;
        let bias = b.init.uniform(&[d_out], bound)?;
        Ok(Self {
            weight: b.register(format!("{name}.weight"), w, ParamKind::Trainable)?,
            bias: b.register(format!("{name}.bias"), bias, ParamKind::Trainable)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

/// 3x3 max pool, stride 2, padding 1, built from shifted strided slices so
/// that it stays differentiable. Expects non-negative input (post-ReLU), so
/// zero padding is equivalent to negative-infinity padding.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let ho = (h + 2 - 3) / 2 + 1;
    let wo = (w + 2 - 3) / 2 + 1;
    // pad so every shifted window has room for 2*ho rows / 2*wo cols
    let pad_h = (2 * ho + 2).saturating_sub(h + 1);
    let pad_w = (2 * wo + 2).saturating_sub(w + 1);
    let p = x.pad_with_zeros(2, 1, pad_h)?.pad_with_zeros(3, 1, pad_w)?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let s = p
                .narrow(2, dy, 2 * ho)?
                .narrow(3, dx, 2 * wo)?
                .reshape((b, c, ho, 2, wo, 2))?
                .narrow(3, 0, 1)?
                .narrow(5, 0, 1)?
                .reshape((b, c, ho, wo))?;
            out = Some(match out {
                None => s,
                Some(o) => o.maximum(&s)?,
            });
        }
    }
    Ok(out.expect("nine windows"))
}

/// Global average over the spatial dimensions: (B, C, H, W) -> (B, C).
/// 2x2 max-pool with stride 2; odd trailing rows/columns are dropped.
///
/// Built from a reshape and two max reductions: candle-core 0.9's
/// `max_pool2d` backward scales the gradient by `1 / (k*k)`.
pub fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    let x = x.narrow(2, 0, 2 * ho)?.narrow(3, 0, 2 * wo)?.contiguous()?;
    Ok(x.reshape((b, c, ho, 2, wo, 2))?.max(5)?.max(3)?)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}
