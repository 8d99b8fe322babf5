//! Accuracy, confusion matrices, mean confidence and report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::stack_images;
use crate::error::{Error, Result};
use crate::fusion::{fuse, per_image_logits, PredictionRecord};
use crate::nets::{BnMode, BundleConfig, ModelBundle};
use crate::trainer::{ExperimentResult, FoldFailure, FoldSummary, Pipeline, TrainConfig};

/// Schema tag written into every summary.json.
pub const SUMMARY_FORMAT: &str = "classfuse-summary-v1";

/// Rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn from_records(records: &[PredictionRecord], class_names: Vec<String>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("no records for confusion matrix".into()));
        }
        let n = class_names.len();
        let mut counts = vec![vec![0u64; n]; n];
        for r in records {
            for c in [r.truth, r.fused_class] {
                if c >= n {
                    return Err(Error::LabelOutOfRange { label: c, n_classes: n });
                }
            }
            counts[r.truth][r.fused_class] += 1;
        }
        Ok(Self { counts, class_names })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Header of class names, then one row per actual class.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.class_names)?;
        for row in &self.counts {
            w.write_record(row.iter().map(u64::to_string))?;
        }
        csv_string(w)
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Fraction of records whose fused class equals the truth.
pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("no records".into()));
    }
    Ok(records.iter().filter(|r| r.is_correct()).count() as f64 / records.len() as f64)
}

/// Mean winning logit over records of class `k` that were classified as
/// `k`. `None` when there are none.
pub fn mean_confidence<'a>(records: impl IntoIterator<Item = &'a PredictionRecord>, k: usize) -> Option<f64> {
    let (sum, count) = records
        .into_iter()
        .filter(|r| r.truth == k && r.fused_class == k)
        .fold((0.0, 0usize), |(s, c), r| (s + r.winning_logit, c + 1));
    (count > 0).then(|| sum / count as f64)
}

pub fn mean_confidences<'a>(records: impl IntoIterator<Item = &'a PredictionRecord>, n_classes: usize) -> Vec<Option<f64>> {
    let records: Vec<&PredictionRecord> = records.into_iter().collect();
    (0..n_classes)
        .map(|k| mean_confidence(records.iter().copied(), k))
        .collect()
}

/// Contents of summary.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub label: String,
    pub pipeline: Pipeline,
    pub lambda: f64,
    pub config_digest: String,
    pub class_names: Vec<String>,
    pub n_folds: usize,
    pub complete: bool,
    /// Mean of the per-fold test accuracies over completed folds.
    pub mean_accuracy: Option<f64>,
    /// Pooled over the test records of all completed folds.
    pub mean_confidences: Vec<Option<f64>>,
    pub per_fold: Vec<FoldSummary>,
    pub failure: Option<FoldFailure>,
    pub train_config: TrainConfig,
    pub bundle_config: BundleConfig,
}

impl Summary {
    pub fn from_result(result: &ExperimentResult) -> Self {
        Self {
            format: SUMMARY_FORMAT.to_string(),
            label: result.label.clone(),
            pipeline: result.pipeline,
            lambda: result.lambda,
            config_digest: result.config_digest.clone(),
            class_names: result.class_names.clone(),
            n_folds: result.n_folds,
            complete: result.is_complete(),
            mean_accuracy: result.mean_accuracy(),
            mean_confidences: result.mean_confidences(),
            per_fold: result.per_fold.iter().map(|f| f.summary.clone()).collect(),
            failure: result.failure.clone(),
            train_config: result.train_config.clone(),
            bundle_config: result.bundle_config.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// The one-page text table.
pub fn render_table(summary: &Summary) -> String {
    let mut s = String::new();
    let label = if summary.label.is_empty() { "(unnamed)" } else { &summary.label };
    let _ = writeln!(s, "setup          {label}");
    let _ = writeln!(s, "pipeline       {:?}", summary.pipeline);
    let _ = writeln!(s, "lambda         {}", summary.lambda);
    let _ = writeln!(s, "folds          {}/{}", summary.per_fold.len(), summary.n_folds);
    let _ = writeln!(s, "mean accuracy  {}", fmt_opt(summary.mean_accuracy));
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<20} {:>15}", "class", "mean confidence");
    for (name, c) in summary.class_names.iter().zip(&summary.mean_confidences) {
        let _ = writeln!(s, "{name:<20} {:>15}", fmt_opt(*c));
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<5} {:>10} {:>7} {:>10} {:>9}", "fold", "best_epoch", "epochs", "val_loss", "test_acc");
    for f in &summary.per_fold {
        let _ = writeln!(
            s,
            "{:<5} {:>10} {:>7} {:>10.4} {:>9.4}",
            f.fold, f.best_epoch, f.epochs_run, f.val_loss, f.test_accuracy
        );
    }
    if let Some(fail) = &summary.failure {
        let _ = writeln!(s);
        let _ = writeln!(s, "fold {} aborted: {}", fail.fold, fail.message);
    }
    s
}

/// Prediction dump: image_id, truth, fused_class, winning_logit, then the
/// N*N logits in stream-major order.
pub fn predictions_csv(records: &[PredictionRecord], n_classes: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["image_id".to_string(), "truth".into(), "fused_class".into(), "winning_logit".into()];
    for k in 0..n_classes {
        for c in 0..n_classes {
            header.push(format!("logit_{k}_{c}"));
        }
    }
    w.write_record(&header)?;
    for r in records {
        if r.logits.len() != n_classes || r.logits.iter().any(|l| l.len() != n_classes) {
            return Err(Error::ClassCount {
                expected: n_classes,
                found: r.logits.len(),
            });
        }
        let mut row = vec![
            r.image_id.clone(),
            r.truth.to_string(),
            r.fused_class.to_string(),
            r.winning_logit.to_string(),
        ];
        row.extend(r.flat_logits().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    csv_string(w)
}

fn metrics_csv(result: &crate::trainer::FoldResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss_clf", "mean_gen_total", "val_loss", "val_acc", "lr_clf"])?;
    for m in &result.history {
        w.write_record([
            m.epoch.to_string(),
            m.train_loss_clf.to_string(),
            m.mean_gen_total.to_string(),
            m.val_loss.to_string(),
            m.val_acc.to_string(),
            m.lr_clf.to_string(),
        ])?;
    }
    csv_string(w)
}

fn losses_csv(result: &crate::trainer::FoldResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "k", "l_mse", "l_perceptual", "l_ce_routed", "lambda", "total"])?;
    for l in &result.losses {
        let b = &l.breakdown;
        w.write_record([
            l.step.to_string(),
            b.generator_index.to_string(),
            b.l_mse.to_string(),
            b.l_perceptual.to_string(),
            b.l_ce_routed.to_string(),
            b.lambda.to_string(),
            b.total.to_string(),
        ])?;
    }
    csv_string(w)
}

fn write(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, contents)?;
    written.push(p);
    Ok(())
}

/// Write summary.json, report.txt and per-fold confusion, metrics, loss
/// and prediction CSVs. Returns the paths written.
pub fn emit_report(result: &ExperimentResult, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let summary = Summary::from_result(result);
    let n = result.class_names.len();
    let mut written = Vec::new();
    write(dir, "summary.json", &summary.to_json()?, &mut written)?;
    write(dir, "report.txt", &render_table(&summary), &mut written)?;
    for f in &result.per_fold {
        let i = f.summary.fold;
        write(dir, &format!("confusion_fold{i}.csv"), &f.confusion.to_csv()?, &mut written)?;
        write(dir, &format!("metrics_fold{i}.csv"), &metrics_csv(f)?, &mut written)?;
        write(dir, &format!("losses_fold{i}.csv"), &losses_csv(f)?, &mut written)?;
        write(dir, &format!("predictions_fold{i}.csv"), &predictions_csv(&f.test_records, n)?, &mut written)?;
    }
    Ok(written)
}

/// File-name-safe form of an image id: separators and other unusual
/// characters become `_`, and an image extension is dropped.
pub fn file_stem(image_id: &str) -> String {
    let trimmed = [".png", ".jpg", ".jpeg", ".PNG", ".JPG", ".JPEG"]
        .iter()
        .find_map(|ext| image_id.strip_suffix(ext))
        .unwrap_or(image_id);
    trimmed
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Write a 3 x H x W image in [0, 1] as 8-bit PNG (values are clamped).
pub fn save_png(pixels: &[f32], (h, w): (usize, usize), path: &Path) -> Result<()> {
    if pixels.len() != 3 * h * w {
        return Err(Error::Shape(format!("{} values for a 3x{h}x{w} image", pixels.len())));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = std::array::from_fn(|c| (pixels[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

fn tensor_images(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    let t = t.to_dtype(candle_core::DType::F32)?;
    (0..t.dim(0)?).map(|i| Ok(t.get(i)?.flatten_all()?.to_vec1::<f32>()?)).collect()
}

/// For each image write `<id>_orig.png` and `<id>_gen<k>.png` for every
/// generator, plus `logits.csv` with one row per (image, stream). Uses
/// evaluation-mode batch norm, so the logits match
/// [`predict_batch`](crate::fusion::predict_batch).
pub fn dump_transforms(
    bundle: &ModelBundle,
    images: &[(String, Vec<f32>)],
    size: (usize, usize),
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    if images.is_empty() {
        return Err(Error::Empty("no images to transform".into()));
    }
    let n = bundle.n_classes();
    let refs: Vec<&[f32]> = images.iter().map(|(_, p)| p.as_slice()).collect();
    let x = stack_images(&refs, size, bundle.dtype())?;
    let mut written = Vec::new();
    let stems: Vec<String> = images.iter().map(|(id, _)| file_stem(id)).collect();
    for (stem, (_, px)) in stems.iter().zip(images) {
        let p = dir.join(format!("{stem}_orig.png"));
        save_png(px, size, &p)?;
        written.push(p);
    }
    let mut streams = Vec::with_capacity(n);
    for (k, g) in bundle.generators.iter().enumerate() {
        let xp = g.forward(&x, BnMode::Eval)?;
        for (stem, img) in stems.iter().zip(tensor_images(&xp)?) {
            let p = dir.join(format!("{stem}_gen{k}.png"));
            save_png(&img, size, &p)?;
            written.push(p);
        }
        streams.push(bundle.classifier.forward(&xp, BnMode::Eval)?);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["image_id".to_string(), "stream".into()];
    header.extend((0..n).map(|c| format!("logit_{c}")));
    header.extend(["fused_class".to_string(), "winning_logit".into()]);
    w.write_record(&header)?;
    for ((id, _), logits) in images.iter().zip(per_image_logits(&streams)?) {
        let (class, win) = fuse(&logits)?;
        for (k, row) in logits.iter().enumerate() {
            let mut rec = vec![id.clone(), k.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            rec.extend([class.to_string(), win.to_string()]);
            w.write_record(&rec)?;
        }
    }
    write(dir, "logits.csv", &csv_string(w)?, &mut written)?;
    Ok(written)
}
