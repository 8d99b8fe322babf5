//! Classifier and generator objectives.
//!
//! All functions return scalar tensors so they can be back-propagated;
//! [`LossBreakdown`] carries the extracted values for logging.
//!
//! * [`pixel_mse`] / [`perceptual_mse`]: mean squared difference in image
//!   space and in the frozen extractor's feature space, averaged over batch,
//!   channels and spatial positions.
//! * [`classifier_ce`]: cross-entropy summed over all N transformed streams,
//!   averaged over the batch.
//! * [`routed_ce`]: the cross-entropy credited to generator k, i.e. only the
//!   samples whose ground truth is k, scored on their class-k probability.
//! * [`generator_loss`]: `l_mse + w_p * l_perceptual + lambda * l_ce_routed`.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::PerceptualNet;

/// Perceptual term weight in the generator objective.
pub const PERCEPTUAL_WEIGHT: f64 = 0.006;

/// Ground-truth labels of one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    labels: Vec<usize>,
    n_classes: usize,
}

impl LabelBatch {
    pub fn new(labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange { label, n_classes });
        }
        Ok(Self { labels, n_classes })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.labels.contains(&k)
    }

    /// (B, N) one-hot matrix in `dtype`.
    pub fn one_hot(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let n = self.n_classes;
        let mut data = vec![0f64; self.labels.len() * n];
        for (j, &l) in self.labels.iter().enumerate() {
            data[j * n + l] = 1.0;
        }
        Ok(Tensor::from_vec(data, (self.labels.len(), n), device)?.to_dtype(dtype)?)
    }
}

/// Per-step record of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub generator_index: usize,
    pub l_mse: f64,
    pub l_perceptual: f64,
    pub l_ce_routed: f64,
    pub lambda: f64,
    pub perceptual_weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn similarity(&self) -> f64 {
        self.l_mse + self.perceptual_weight * self.l_perceptual
    }
}

/// Generator objective as a differentiable scalar plus its logged parts.
#[derive(Debug, Clone)]
pub struct GeneratorLoss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn pixel_mse(x: &Tensor, xp: &Tensor) -> Result<Tensor> {
    check_same_shape(x, xp)?;
    Ok((x - xp)?.sqr()?.mean_all()?)
}

/// Mean squared difference between two already-extracted feature batches.
pub fn feature_mse(fx: &Tensor, fxp: &Tensor) -> Result<Tensor> {
    check_same_shape(fx, fxp)?;
    Ok((fx - fxp)?.sqr()?.mean_all()?)
}

pub fn perceptual_mse(pnet: &PerceptualNet, x: &Tensor, xp: &Tensor) -> Result<Tensor> {
    check_same_shape(x, xp)?;
    feature_mse(&pnet.features(x)?, &pnet.features(xp)?)
}

fn check_logits(logits: &Tensor, labels: &LabelBatch) -> Result<()> {
    let (b, n) = logits.dims2()?;
    if b != labels.len() || n != labels.n_classes() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} labels over {} classes",
            logits.dims(),
            labels.len(),
            labels.n_classes()
        )));
    }
    Ok(())
}

/// Cross-entropy of one stream, averaged over the batch.
pub fn stream_ce(logits: &Tensor, labels: &LabelBatch) -> Result<Tensor> {
    check_logits(logits, labels)?;
    let y = labels.one_hot(logits.dtype(), logits.device())?;
    let b = labels.len() as f64;
    Ok(((log_softmax(logits)? * y)?.sum_all()? * (-1.0 / b))?)
}

/// Classifier objective: the per-stream cross-entropies summed over all N
/// generator streams (`streams[k]` holds the (B, N) logits of `G_k(X)`).
pub fn classifier_ce(streams: &[Tensor], labels: &LabelBatch) -> Result<Tensor> {
    if streams.is_empty() {
        return Err(Error::Empty("no logit streams".into()));
    }
    let mut total: Option<Tensor> = None;
    for s in streams {
        let ce = stream_ce(s, labels)?;
        total = Some(match total {
            None => ce,
            Some(t) => (t + ce)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Cross-entropy routed to generator `k`: `-(1/B) * sum_j y_j[k] * log p_k(j)[k]`.
///
/// Returns a constant zero (no graph) when class `k` is absent from the
/// batch, so such a batch contributes nothing to generator `k`'s gradient.
pub fn routed_ce(logits_k: &Tensor, labels: &LabelBatch, k: usize) -> Result<Tensor> {
    check_logits(logits_k, labels)?;
    if k >= labels.n_classes() {
        return Err(Error::LabelOutOfRange {
            label: k,
            n_classes: labels.n_classes(),
        });
    }
    if !labels.contains(k) {
        return Ok(Tensor::zeros((), logits_k.dtype(), logits_k.device())?);
    }
    let mask = labels.one_hot(logits_k.dtype(), logits_k.device())?.narrow(1, k, 1)?;
    let logp_k = log_softmax(logits_k)?.narrow(1, k, 1)?;
    let b = labels.len() as f64;
    Ok(((logp_k * mask)?.sum_all()? * (-1.0 / b))?)
}

/// Composite objective of generator `k`.
///
/// `logits_k` are the classifier's logits on `xp_k`; they may be `None` only
/// when class `k` does not occur in `labels` (the routed term is then zero
/// and the classifier does not need to run).
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    pnet: &PerceptualNet,
    x: &Tensor,
    xp_k: &Tensor,
    logits_k: Option<&Tensor>,
    labels: &LabelBatch,
    k: usize,
    lambda: f64,
    perceptual_weight: f64,
) -> Result<GeneratorLoss> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config("lambda", format!("must be finite and >= 0, got {lambda}")));
    }
    let l_mse = pixel_mse(x, xp_k)?;
    let l_perc = perceptual_mse(pnet, x, xp_k)?;
    let routed = match logits_k {
        Some(l) => routed_ce(l, labels, k)?,
        None if !labels.contains(k) => Tensor::zeros((), x.dtype(), x.device())?,
        None => {
            return Err(Error::Shape(format!(
                "class {k} is present in the batch but no logits were supplied"
            )))
        }
    };
    let mut total = (&l_mse + (&l_perc * perceptual_weight)?)?;
    if lambda > 0.0 && labels.contains(k) {
        total = (total + (&routed * lambda)?)?;
    }
    let breakdown = LossBreakdown {
        generator_index: k,
        l_mse: scalar(&l_mse)?,
        l_perceptual: scalar(&l_perc)?,
        l_ce_routed: scalar(&routed)?,
        lambda,
        perceptual_weight,
        total: scalar(&total)?,
    };
    Ok(GeneratorLoss { total, breakdown })
}
