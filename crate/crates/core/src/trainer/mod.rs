//! Alternating training, cross-validated experiments and the λ sweep.

mod config;
mod schedule;
mod steps;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{Pipeline, TrainConfig, ValLoss, DEFAULT_LAMBDA_GRID};
pub use schedule::{step_decay, EarlyStopping, StopDecision};
pub use steps::{
    classifier_step, evaluate, generator_step, train_epoch, ClassifierStepOutput, EpochMetrics, EpochOutput,
    EvalOutput, StepLoss, MIN_TRAIN_BATCH,
};

use crate::data::{Dataset, FoldSplits};
use crate::error::{DivergenceReport, Error, Result};
use crate::evalreport::{mean_confidences, ConfusionMatrix};
use crate::fusion::PredictionRecord;
use crate::nets::params::derive_seed;
use crate::nets::{load_pretrained_classifier, save_weights, BundleConfig, BundleSnapshot, ModelBundle};

/// Loop state of one fold.
pub struct TrainState {
    pub bundle: ModelBundle,
    /// Epochs completed.
    pub epoch: usize,
    pub early: EarlyStopping,
    pub history: Vec<EpochMetrics>,
    pub losses: Vec<StepLoss>,
    best: Option<BundleSnapshot>,
    steps: usize,
}

impl TrainState {
    pub fn new(bundle: ModelBundle, patience: usize) -> Self {
        Self {
            bundle,
            epoch: 0,
            early: EarlyStopping::new(patience),
            history: Vec::new(),
            losses: Vec::new(),
            best: None,
            steps: 0,
        }
    }

    /// Train one epoch, validate, and update early stopping. Returns whether
    /// this epoch is the new best.
    pub fn advance(&mut self, cfg: &TrainConfig, ds: &Dataset, train: &[usize], val: &[usize]) -> Result<(bool, StopDecision)> {
        let out = train_epoch(&mut self.bundle, cfg, ds, train, self.epoch, self.steps)?;
        self.steps += out.batches;
        let v = evaluate(&self.bundle, cfg, ds, val)?;
        if !v.loss.is_finite() {
            return Err(Error::Divergence(Box::new(DivergenceReport {
                fold: None,
                epoch: self.epoch + 1,
                batch: 0,
                stage: "validation".into(),
                values: vec![("val_loss".into(), v.loss)],
            })));
        }
        self.epoch += 1;
        self.history.push(EpochMetrics {
            epoch: self.epoch,
            train_loss_clf: out.train_loss_clf,
            mean_gen_total: out.mean_gen_total,
            train_acc: out.train_acc,
            val_loss: v.loss,
            val_acc: v.accuracy,
            lr_clf: out.lr_clf,
        });
        self.losses.extend(out.losses);
        self.bundle.info.epoch = self.epoch;
        let (improved, decision) = self.early.observe(self.epoch, v.loss);
        if improved {
            self.bundle.info.val_loss = Some(v.loss);
            self.best = Some(self.bundle.snapshot()?);
        }
        Ok((improved, decision))
    }

    /// Put the best-epoch weights back.
    pub fn restore_best(&mut self) -> Result<()> {
        if let Some(best) = &self.best {
            self.bundle.restore(best)?;
        }
        Ok(())
    }
}

/// Where and how an experiment runs.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOptions {
    /// Checkpoints go to `<out_dir>/fold{f}/{best,last}.ckpt`; none are
    /// written when unset.
    pub out_dir: Option<PathBuf>,
    /// Perceptual weight cache.
    pub cache_dir: Option<PathBuf>,
    /// Free-form setup name carried into reports.
    pub label: String,
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// Validation loss of the best epoch, as recorded during training.
    pub val_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub confusion_matrix: Vec<Vec<u64>>,
    /// Per class; `None` when no test image of that class was classified
    /// correctly.
    pub mean_confidences: Vec<Option<f64>>,
    /// Relative to the experiment directory.
    pub checkpoints: Option<[String; 2]>,
}

/// Full outcome of one fold.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub summary: FoldSummary,
    pub history: Vec<EpochMetrics>,
    pub losses: Vec<StepLoss>,
    pub test_records: Vec<PredictionRecord>,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub fold: usize,
    pub diverged: bool,
    pub message: String,
    pub report: Option<DivergenceReport>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub label: String,
    pub lambda: f64,
    pub pipeline: Pipeline,
    pub config_digest: String,
    pub train_config: TrainConfig,
    pub bundle_config: BundleConfig,
    pub class_names: Vec<String>,
    pub n_folds: usize,
    pub per_fold: Vec<FoldResult>,
    /// Set when a fold aborted; later folds are not run.
    pub failure: Option<FoldFailure>,
}

impl ExperimentResult {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none() && self.per_fold.len() == self.n_folds
    }

    /// Mean of the per-fold test accuracies.
    pub fn mean_accuracy(&self) -> Option<f64> {
        if self.per_fold.is_empty() {
            return None;
        }
        Some(self.per_fold.iter().map(|f| f.summary.test_accuracy).sum::<f64>() / self.per_fold.len() as f64)
    }

    /// Per-class mean confidence pooled over the test records of all folds.
    pub fn mean_confidences(&self) -> Vec<Option<f64>> {
        let all: Vec<&PredictionRecord> = self.per_fold.iter().flat_map(|f| &f.test_records).collect();
        mean_confidences(all.iter().copied(), self.class_names.len())
    }
}

fn check_classes(cfg: &TrainConfig, bundle_cfg: &BundleConfig, ds: &Dataset) -> Result<()> {
    if bundle_cfg.n_classes != cfg.n_classes {
        return Err(Error::ClassCount {
            expected: cfg.n_classes,
            found: bundle_cfg.n_classes,
        });
    }
    if ds.n_classes() != cfg.n_classes {
        return Err(Error::ClassCount {
            expected: cfg.n_classes,
            found: ds.n_classes(),
        });
    }
    Ok(())
}

/// A fresh bundle for fold `f`, seeded from the experiment seed.
pub fn fold_bundle(cfg: &TrainConfig, bundle_cfg: &BundleConfig, fold: usize, cache_dir: Option<&Path>) -> Result<ModelBundle> {
    let seeded = BundleConfig {
        seed: derive_seed(cfg.seed, &format!("fold.{fold}")),
        ..bundle_cfg.clone()
    };
    let mut bundle = ModelBundle::new(&seeded, &cfg.optim_settings(), cache_dir)?;
    if let Some(path) = &cfg.classifier_weights {
        load_pretrained_classifier(&bundle.classifier, path)?;
    }
    bundle.info.lambda = cfg.lambda;
    Ok(bundle)
}

/// Train and test one fold.
pub fn run_fold(
    cfg: &TrainConfig,
    bundle_cfg: &BundleConfig,
    ds: &Dataset,
    folds: &FoldSplits,
    fold: usize,
    opts: &ExperimentOptions,
) -> Result<FoldResult> {
    let split = folds
        .folds
        .get(fold)
        .ok_or_else(|| Error::Data(format!("fold {fold} out of range ({} folds)", folds.len())))?;
    let fold_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, &format!("fold.{fold}.train")),
        ..cfg.clone()
    };
    let bundle = fold_bundle(cfg, bundle_cfg, fold, opts.cache_dir.as_deref())?;
    let mut state = TrainState::new(bundle, cfg.patience);
    let dir = opts.out_dir.as_ref().map(|d| d.join(format!("fold{fold}")));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d)?;
    }
    let mut stopped_early = false;
    for _ in 0..cfg.epochs {
        let (improved, decision) = state.advance(&fold_cfg, ds, &split.train, &split.val)?;
        if opts.progress {
            let m = state.history.last().expect("epoch recorded");
            eprintln!(
                "lambda {} fold {fold} epoch {:>3}  clf {:.4}  gen {:.4}  val {:.4}  val_acc {:.3}{}",
                cfg.lambda,
                m.epoch,
                m.train_loss_clf,
                m.mean_gen_total,
                m.val_loss,
                m.val_acc,
                if improved { "  *" } else { "" }
            );
        }
        if improved {
            if let Some(d) = &dir {
                save_weights(&state.bundle, d.join("best.ckpt"))?;
            }
        }
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }
    if let Some(d) = &dir {
        save_weights(&state.bundle, d.join("last.ckpt"))?;
    }
    state.restore_best()?;
    let test = evaluate(&state.bundle, &fold_cfg, ds, &split.test)?;
    let confusion = ConfusionMatrix::from_records(&test.records, ds.class_names.clone())?;
    let summary = FoldSummary {
        fold,
        best_epoch: state.early.best_epoch,
        epochs_run: state.epoch,
        stopped_early,
        val_loss: state.early.best_loss,
        test_loss: test.loss,
        test_accuracy: test.accuracy,
        confusion_matrix: confusion.counts.clone(),
        mean_confidences: mean_confidences(&test.records, ds.n_classes()),
        checkpoints: dir
            .as_ref()
            .map(|_| [format!("fold{fold}/best.ckpt"), format!("fold{fold}/last.ckpt")]),
    };
    Ok(FoldResult {
        summary,
        history: state.history,
        losses: state.losses,
        test_records: test.records,
        confusion,
    })
}

/// Cross-validated run: every fold in order with a fresh bundle.
///
/// Configuration and class-count errors are returned directly. An error
/// inside a fold stops the experiment and is reported in
/// [`ExperimentResult::failure`] next to the folds that completed.
pub fn run_experiment(
    cfg: &TrainConfig,
    bundle_cfg: &BundleConfig,
    ds: &Dataset,
    folds: &FoldSplits,
    opts: &ExperimentOptions,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    bundle_cfg.validate()?;
    check_classes(cfg, bundle_cfg, ds)?;
    if folds.is_empty() {
        return Err(Error::Empty("fold list".into()));
    }
    let mut result = ExperimentResult {
        label: opts.label.clone(),
        lambda: cfg.lambda,
        pipeline: cfg.pipeline,
        config_digest: bundle_cfg.digest(),
        train_config: cfg.clone(),
        bundle_config: bundle_cfg.clone(),
        class_names: ds.class_names.clone(),
        n_folds: folds.len(),
        per_fold: Vec::new(),
        failure: None,
    };
    for f in 0..folds.len() {
        match run_fold(cfg, bundle_cfg, ds, folds, f, opts) {
            Ok(r) => result.per_fold.push(r),
            Err(e) => {
                let report = match &e {
                    Error::Divergence(r) => Some(DivergenceReport {
                        fold: Some(f),
                        ..(**r).clone()
                    }),
                    _ => None,
                };
                if let (Some(r), Some(dir)) = (&report, &opts.out_dir) {
                    let d = dir.join(format!("fold{f}"));
                    std::fs::create_dir_all(&d)?;
                    std::fs::write(d.join("divergence.json"), serde_json::to_string_pretty(r)?)?;
                }
                result.failure = Some(FoldFailure {
                    fold: f,
                    diverged: report.is_some(),
                    message: e.to_string(),
                    report,
                });
                break;
            }
        }
    }
    Ok(result)
}

/// Directory name of one λ inside a sweep.
pub fn lambda_dir_name(lambda: f64) -> String {
    format!("lambda_{lambda}")
}

/// Outcome of a λ sweep, in grid order.
#[derive(Debug)]
pub struct SweepResult {
    pub runs: Vec<(f64, Result<ExperimentResult>)>,
    pub best_lambda: Option<f64>,
}

/// Highest mean accuracy among complete runs; ties go to the smaller λ.
pub fn best_lambda<'a>(runs: impl IntoIterator<Item = (f64, Option<f64>)> + 'a) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for (lambda, acc) in runs {
        let Some(acc) = acc else { continue };
        best = match best {
            None => Some((lambda, acc)),
            Some((bl, ba)) if acc > ba || (acc == ba && lambda < bl) => Some((lambda, acc)),
            keep => keep,
        };
    }
    best.map(|(l, _)| l)
}

/// One experiment per λ, each in `<out_dir>/lambda_<λ>` when an output
/// directory is given. `jobs` workers run experiments concurrently; a failed
/// λ does not stop the others.
pub fn lambda_sweep(
    cfg: &TrainConfig,
    bundle_cfg: &BundleConfig,
    ds: &Dataset,
    folds: &FoldSplits,
    lambdas: &[f64],
    opts: &ExperimentOptions,
    jobs: usize,
) -> Result<SweepResult> {
    if lambdas.is_empty() {
        return Err(Error::Empty("lambda grid".into()));
    }
    for &l in lambdas {
        TrainConfig { lambda: l, ..cfg.clone() }.validate()?;
    }
    let run_one = |lambda: f64| {
        let c = TrainConfig { lambda, ..cfg.clone() };
        let o = ExperimentOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(lambda_dir_name(lambda))),
            ..opts.clone()
        };
        (lambda, run_experiment(&c, bundle_cfg, ds, folds, &o))
    };
    let runs: Vec<(f64, Result<ExperimentResult>)> = if jobs <= 1 {
        lambdas.iter().map(|&l| run_one(l)).collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::config("jobs", e.to_string()))?;
        pool.install(|| lambdas.par_iter().map(|&l| run_one(l)).collect())
    };
    let best = best_lambda(runs.iter().map(|(l, r)| {
        let acc = r.as_ref().ok().filter(|e| e.is_complete()).and_then(|e| e.mean_accuracy());
        (*l, acc)
    }));
    Ok(SweepResult { runs, best_lambda: best })
}
