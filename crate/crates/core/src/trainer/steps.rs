//! One batch of the alternating protocol: first the classifier, then every
//! generator.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Pipeline, TrainConfig, ValLoss};
use crate::data::{augment, stack_images, Dataset};
use crate::error::{DivergenceReport, Error, Result};
use crate::fusion::{fuse, per_image_logits, PredictionRecord};
use crate::losses::{classifier_ce, generator_loss, stream_ce, LabelBatch, LossBreakdown};
use crate::nets::params::derive_seed;
use crate::nets::{BnMode, ModelBundle};

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn diverged(stage: &str, values: Vec<(String, f64)>) -> Error {
    Error::Divergence(Box::new(DivergenceReport {
        fold: None,
        epoch: 0,
        batch: 0,
        stage: stage.to_string(),
        values,
    }))
}

/// Output of a classifier update.
#[derive(Debug, Clone)]
pub struct ClassifierStepOutput {
    pub loss: f64,
    /// Pre-update logits per stream, (B, N) each.
    pub streams: Vec<Tensor>,
}

/// Update the classifier once.
///
/// The generators run with batch statistics (their running statistics are
/// left alone) and their outputs are detached, so no gradient reaches them.
/// Only the classifier optimizer steps.
pub fn classifier_step(
    bundle: &mut ModelBundle,
    cfg: &TrainConfig,
    x: &Tensor,
    labels: &LabelBatch,
    lr: f64,
) -> Result<ClassifierStepOutput> {
    if labels.is_empty() {
        return Err(Error::Empty("classifier_step needs a non-empty batch".into()));
    }
    let streams = match cfg.pipeline {
        Pipeline::Fused => bundle
            .generators
            .iter()
            .map(|g| {
                let xp = g.forward(x, BnMode::BatchStats)?.detach();
                bundle.classifier.forward(&xp, BnMode::Train)
            })
            .collect::<Result<Vec<_>>>()?,
        Pipeline::ClassifierOnly => vec![bundle.classifier.forward(x, BnMode::Train)?],
    };
    let loss = classifier_ce(&streams, labels)?;
    let value = scalar(&loss)?;
    if !value.is_finite() {
        return Err(diverged("classifier", vec![("l_ce".into(), value)]));
    }
    let grads = loss.backward()?;
    bundle.clf_opt.set_lr(lr);
    bundle.clf_opt.step(&grads)?;
    let streams = streams.into_iter().map(|s| s.detach()).collect();
    Ok(ClassifierStepOutput { loss: value, streams })
}

/// Update every generator once.
///
/// Generator k sees the similarity term over the whole batch plus the
/// routed cross-entropy over its own class. The classifier runs with batch
/// statistics and is never stepped; gradients pass through it into the
/// generator.
pub fn generator_step(
    bundle: &mut ModelBundle,
    cfg: &TrainConfig,
    x: &Tensor,
    labels: &LabelBatch,
) -> Result<Vec<LossBreakdown>> {
    if labels.is_empty() {
        return Err(Error::Empty("generator_step needs a non-empty batch".into()));
    }
    let mut out = Vec::with_capacity(bundle.generators.len());
    for k in 0..bundle.generators.len() {
        let xp = bundle.generators[k].forward(x, BnMode::Train)?;
        let logits = if labels.contains(k) {
            Some(bundle.classifier.forward(&xp, BnMode::BatchStats)?)
        } else {
            None
        };
        let loss = generator_loss(
            &bundle.perceptual,
            x,
            &xp,
            logits.as_ref(),
            labels,
            k,
            cfg.lambda,
            cfg.perceptual_weight,
        )?;
        let b = loss.breakdown;
        if !b.total.is_finite() {
            return Err(diverged(
                &format!("generator {k}"),
                vec![
                    ("l_mse".into(), b.l_mse),
                    ("l_perceptual".into(), b.l_perceptual),
                    ("l_ce_routed".into(), b.l_ce_routed),
                    ("total".into(), b.total),
                ],
            ));
        }
        let grads = loss.total.backward()?;
        bundle.gen_opts[k].step(&grads)?;
        out.push(b);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss_clf: f64,
    pub mean_gen_total: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr_clf: f64,
}

/// Per-step generator loss record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct EpochOutput {
    pub train_loss_clf: f64,
    pub mean_gen_total: f64,
    pub train_acc: f64,
    pub lr_clf: f64,
    pub batches: usize,
    pub losses: Vec<StepLoss>,
}

/// Fused class of each image from per-stream logits, or the plain argmax
/// for a single stream.
type Predicted = (usize, f64, Vec<Vec<f64>>);

fn predicted_classes(streams: &[Tensor]) -> Result<Vec<Predicted>> {
    per_image_logits(streams)?
        .into_iter()
        .map(|logits| {
            let (c, v) = if logits.len() == 1 {
                argmax(&logits[0])
            } else {
                fuse(&logits)?
            };
            Ok((c, v, logits))
        })
        .collect()
}

fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 || i == 0 { (i, x) } else { best })
}

/// Minimum batch size trained on; a trailing batch smaller than this is
/// dropped (batch statistics are degenerate on a single image).
pub const MIN_TRAIN_BATCH: usize = 2;

/// One pass over `train` in seeded shuffled order.
///
/// `epoch` is 0-based; it selects the learning rate and the shuffle and
/// augmentation streams. `step_offset` numbers the logged steps.
pub fn train_epoch(
    bundle: &mut ModelBundle,
    cfg: &TrainConfig,
    ds: &Dataset,
    train: &[usize],
    epoch: usize,
    step_offset: usize,
) -> Result<EpochOutput> {
    if train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let lr = cfg.lr_schedule(epoch);
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle.{epoch}"))));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("augment.{epoch}")));

    let mut clf_sum = 0.0;
    let mut gen_sum = 0.0;
    let mut gen_count = 0usize;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut batches = 0usize;
    let mut losses = Vec::new();
    let dtype = bundle.dtype();
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        if chunk.len() < MIN_TRAIN_BATCH && batches > 0 {
            continue;
        }
        let images: Vec<Vec<f32>> = chunk
            .iter()
            .map(|&i| augment(&ds.samples[i].pixels, ds.image_size, &cfg.augment, &mut aug_rng))
            .collect();
        let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
        let x = stack_images(&refs, ds.image_size, dtype)?;
        let labels = LabelBatch::new(ds.labels(chunk), bundle.n_classes())?;
        let with_context = |e: Error| match e {
            Error::Divergence(mut r) => {
                r.epoch = epoch + 1;
                r.batch = bi;
                Error::Divergence(r)
            }
            other => other,
        };

        let clf = classifier_step(bundle, cfg, &x, &labels, lr).map_err(with_context)?;
        clf_sum += clf.loss;
        for ((c, _, _), &truth) in predicted_classes(&clf.streams)?.iter().zip(labels.labels()) {
            correct += usize::from(*c == truth);
        }
        seen += chunk.len();

        if cfg.pipeline == Pipeline::Fused {
            let step = step_offset + batches;
            for b in generator_step(bundle, cfg, &x, &labels).map_err(with_context)? {
                gen_sum += b.total;
                gen_count += 1;
                losses.push(StepLoss { step, breakdown: b });
            }
        }
        batches += 1;
    }
    Ok(EpochOutput {
        train_loss_clf: clf_sum / batches as f64,
        mean_gen_total: if gen_count > 0 { gen_sum / gen_count as f64 } else { 0.0 },
        train_acc: correct as f64 / seen as f64,
        lr_clf: lr,
        batches,
        losses,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub loss: f64,
    pub accuracy: f64,
    pub records: Vec<PredictionRecord>,
}

/// Evaluation-mode pass over `indices`: loss (per `cfg.val_loss`), fused
/// accuracy and one record per image.
pub fn evaluate(bundle: &ModelBundle, cfg: &TrainConfig, ds: &Dataset, indices: &[usize]) -> Result<EvalOutput> {
    if indices.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let mut loss_sum = 0.0;
    let mut records = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(cfg.batch_size.max(1)) {
        let x = ds.batch(chunk, bundle.dtype())?;
        let labels = LabelBatch::new(ds.labels(chunk), bundle.n_classes())?;
        let streams = match cfg.pipeline {
            Pipeline::Fused => crate::fusion::stream_logits(bundle, &x, BnMode::Eval)?,
            Pipeline::ClassifierOnly => vec![bundle.classifier.forward(&x, BnMode::Eval)?],
        };
        let loss = match (cfg.val_loss, cfg.pipeline) {
            (ValLoss::Fused, Pipeline::Fused) => {
                let mut fused = streams[0].clone();
                for s in &streams[1..] {
                    fused = fused.maximum(s)?;
                }
                stream_ce(&fused, &labels)?
            }
            _ => classifier_ce(&streams, &labels)?,
        };
        loss_sum += scalar(&loss)? * chunk.len() as f64;
        for (((c, v, logits), id), &truth) in predicted_classes(&streams)?
            .into_iter()
            .zip(ds.ids(chunk))
            .zip(labels.labels())
        {
            records.push(PredictionRecord {
                image_id: id,
                logits,
                fused_class: c,
                winning_logit: v,
                truth,
            });
        }
    }
    let correct = records.iter().filter(|r| r.is_correct()).count();
    Ok(EvalOutput {
        loss: loss_sum / indices.len() as f64,
        accuracy: correct as f64 / records.len() as f64,
        records,
    })
}
