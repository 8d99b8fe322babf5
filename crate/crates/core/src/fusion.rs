//! Inference-time fusion of the N transformed streams.
//!
//! Each image is broadcast to all N generators, every transformed image is
//! classified, and the N raw logit vectors are concatenated in generator
//! order. The flat argmax `i*` identifies the single most confident
//! (generator, class) pair; `i* mod N` is that pair's class.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{BnMode, ModelBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    /// `logits[k]` is the classifier output on `G_k(x)`.
    pub logits: Vec<Vec<f64>>,
    pub fused_class: usize,
    pub winning_logit: f64,
    pub truth: usize,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> bool {
        self.fused_class == self.truth
    }

    /// Logits in wire order: stream-major, `logit_{k}_{c}`.
    pub fn flat_logits(&self) -> impl Iterator<Item = f64> + '_ {
        self.logits.iter().flatten().copied()
    }
}

/// Fuse N per-stream logit vectors (each of length N, generator order).
///
/// Returns `(class, winning_logit)`. Ties go to the lowest flat index.
///
/// ```
/// use classfuse::fusion::fuse;
/// let (class, logit) = fuse(&[vec![2.0, -1.0], vec![0.5, 3.0]]).unwrap();
/// assert_eq!((class, logit), (1, 3.0));
/// ```
pub fn fuse<V: AsRef<[f64]>>(streams: &[V]) -> Result<(usize, f64)> {
    let n = streams.len();
    if n == 0 {
        return Err(Error::Empty("no logit streams".into()));
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (k, s) in streams.iter().enumerate() {
        let s = s.as_ref();
        if s.len() != n {
            return Err(Error::Shape(format!(
                "stream {k} has {} logits, expected {n}",
                s.len()
            )));
        }
        for (c, &v) in s.iter().enumerate() {
            if v.is_nan() {
                return Err(Error::Shape(format!("stream {k} logit {c} is NaN")));
            }
            let flat = k * n + c;
            if v > best.1 || flat == 0 {
                best = (flat, v);
            }
        }
    }
    Ok((best.0 % n, best.1))
}

/// Fuse a flat row of N*N logits laid out stream-major.
pub fn fuse_flat(flat: &[f64]) -> Result<(usize, f64)> {
    let n = (flat.len() as f64).sqrt().round() as usize;
    if n * n != flat.len() || n == 0 {
        return Err(Error::Shape(format!(
            "{} logits is not a square N*N row",
            flat.len()
        )));
    }
    let streams: Vec<&[f64]> = flat.chunks(n).collect();
    fuse(&streams)
}

/// Per-stream logits for a batch: `out[k]` is (B, N) logits of `G_k(x)`.
pub fn stream_logits(bundle: &ModelBundle, x: &Tensor, mode: BnMode) -> Result<Vec<Tensor>> {
    bundle
        .generators
        .iter()
        .map(|g| bundle.classifier.forward(&g.forward(x, mode)?, mode))
        .collect()
}

/// Convert per-stream (B, N) tensors into `[image][stream][class]`.
pub fn per_image_logits(streams: &[Tensor]) -> Result<Vec<Vec<Vec<f64>>>> {
    let per_stream: Vec<Vec<Vec<f64>>> = streams
        .iter()
        .map(|t| Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?))
        .collect::<Result<_>>()?;
    let b = per_stream.first().map_or(0, Vec::len);
    Ok((0..b)
        .map(|j| per_stream.iter().map(|s| s[j].clone()).collect())
        .collect())
}

/// Evaluation-mode prediction for a batch, records in input order.
pub fn predict_batch(
    bundle: &ModelBundle,
    x: &Tensor,
    ids: &[String],
    truths: &[usize],
) -> Result<Vec<PredictionRecord>> {
    let b = x.dim(0)?;
    if ids.len() != b || truths.len() != b {
        return Err(Error::Shape(format!(
            "{b} images but {} ids and {} truths",
            ids.len(),
            truths.len()
        )));
    }
    let n = bundle.n_classes();
    if let Some(&t) = truths.iter().find(|&&t| t >= n) {
        return Err(Error::ClassCount {
            expected: n,
            found: t + 1,
        });
    }
    let streams = stream_logits(bundle, x, BnMode::Eval)?;
    per_image_logits(&streams)?
        .into_iter()
        .zip(ids.iter().zip(truths))
        .map(|(logits, (id, &truth))| {
            if logits.len() != n || logits.iter().any(|l| l.len() != n) {
                return Err(Error::ClassCount {
                    expected: n,
                    found: logits.len(),
                });
            }
            let (fused_class, winning_logit) = fuse(&logits)?;
            Ok(PredictionRecord {
                image_id: id.clone(),
                logits,
                fused_class,
                winning_logit,
                truth,
            })
        })
        .collect()
}
