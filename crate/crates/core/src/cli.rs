//! Command-line front end. [`run`] returns the process exit code:
//! 0 success, 1 usage/config, 2 data, 3 numerical divergence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{cache_dir, RunConfig};
use crate::data::{stack_images, Split};
use crate::error::{Error, Result};
use crate::evalreport::{
    accuracy, dump_transforms, emit_report, mean_confidences, predictions_csv, save_png, ConfusionMatrix,
};
use crate::fusion::{fuse_flat, predict_batch, PredictionRecord};
use crate::nets::{load_weights, OptimSettings};
use crate::trainer::{lambda_dir_name, lambda_sweep, run_experiment, ExperimentOptions, ExperimentResult};

#[derive(Debug, Parser)]
#[command(name = "classfuse", version, about = "Train, sweep and evaluate per-class transformation generators with a fused classifier")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// KEY=VALUE, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Seed for initialization, folds, shuffling, augmentation and
    /// synthetic data. Overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Concurrent experiments during a sweep.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// No per-epoch progress lines.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-validated training at the configured lambda.
    Train,
    /// One cross-validated run per lambda in `lambdas`.
    Sweep,
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Write the N transformed versions of images plus their logits.
    Transform {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write the synthetic dataset as a class-folder image tree.
    Synth,
    /// Fuse rows of N*N logits from a CSV file.
    FuseOffline {
        #[arg(long)]
        input: PathBuf,
    },
}

/// Parse arguments and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut overrides = g.overrides.clone();
    if let Some(seed) = g.seed {
        overrides.push(format!("seed={seed}"));
    }
    RunConfig::load(g.config.as_deref(), &overrides)
}

pub fn execute(cli: &Cli) -> Result<i32> {
    let g = &cli.global;
    let cfg = load_config(g)?;
    if g.jobs == 0 {
        return Err(Error::config("jobs", "must be >= 1"));
    }
    match &cli.command {
        Command::Train => cmd_train(&cfg, g),
        Command::Sweep => cmd_sweep(&cfg, g),
        Command::Eval { checkpoint, fold, split } => cmd_eval(&cfg, g, checkpoint, *fold, *split),
        Command::Transform { checkpoint, images } => cmd_transform(&cfg, g, checkpoint, images),
        Command::Synth => cmd_synth(&cfg, g),
        Command::FuseOffline { input } => cmd_fuse_offline(g, input),
    }
}

fn experiment_options(cfg: &RunConfig, g: &GlobalArgs, out: &Path) -> ExperimentOptions {
    ExperimentOptions {
        out_dir: Some(out.to_path_buf()),
        cache_dir: cache_dir(),
        label: cfg.label.clone(),
        progress: !g.quiet,
    }
}

fn failure_code(result: &ExperimentResult) -> i32 {
    match &result.failure {
        None => 0,
        Some(f) if f.diverged => 3,
        Some(_) => 2,
    }
}

fn report_line(result: &ExperimentResult) -> String {
    let acc = result.mean_accuracy().map_or("-".to_string(), |a| format!("{a:.4}"));
    let mut line = format!("lambda {}: mean accuracy {acc} over {}/{} folds", result.lambda, result.per_fold.len(), result.n_folds);
    if let Some(f) = &result.failure {
        line.push_str(&format!(" (fold {} aborted: {})", f.fold, f.message));
    }
    line
}

fn cmd_train(cfg: &RunConfig, g: &GlobalArgs) -> Result<i32> {
    let ds = cfg.dataset()?;
    let folds = cfg.folds(&ds)?;
    let n = ds.n_classes();
    std::fs::create_dir_all(&g.out)?;
    std::fs::write(g.out.join("folds.json"), folds.to_manifest(&ds)?)?;
    let result = run_experiment(
        &cfg.train_config(n),
        &cfg.bundle_config(n),
        &ds,
        &folds,
        &experiment_options(cfg, g, &g.out),
    )?;
    emit_report(&result, &g.out)?;
    println!("{}", report_line(&result));
    Ok(failure_code(&result))
}

#[derive(Serialize)]
struct SweepRow {
    lambda: f64,
    dir: String,
    mean_accuracy: Option<f64>,
    complete: bool,
    error: Option<String>,
}

fn cmd_sweep(cfg: &RunConfig, g: &GlobalArgs) -> Result<i32> {
    let ds = cfg.dataset()?;
    let folds = cfg.folds(&ds)?;
    let n = ds.n_classes();
    std::fs::create_dir_all(&g.out)?;
    std::fs::write(g.out.join("folds.json"), folds.to_manifest(&ds)?)?;
    let sweep = lambda_sweep(
        &cfg.train_config(n),
        &cfg.bundle_config(n),
        &ds,
        &folds,
        &cfg.lambdas,
        &experiment_options(cfg, g, &g.out),
        g.jobs,
    )?;
    let mut rows = Vec::new();
    let mut code = 0;
    for (lambda, r) in &sweep.runs {
        let dir = lambda_dir_name(*lambda);
        match r {
            Ok(result) => {
                emit_report(result, g.out.join(&dir))?;
                println!("{}", report_line(result));
                code = code.max(failure_code(result));
                rows.push(SweepRow {
                    lambda: *lambda,
                    dir,
                    mean_accuracy: result.mean_accuracy(),
                    complete: result.is_complete(),
                    error: result.failure.as_ref().map(|f| f.message.clone()),
                });
            }
            Err(e) => {
                eprintln!("lambda {lambda}: {e}");
                code = code.max(e.exit_code());
                rows.push(SweepRow {
                    lambda: *lambda,
                    dir,
                    mean_accuracy: None,
                    complete: false,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    std::fs::write(g.out.join("sweep.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    match sweep.best_lambda {
        Some(best) => {
            std::fs::write(g.out.join("best_lambda.txt"), format!("{}\n", lambda_dir_name(best)))?;
            println!("best lambda {best} ({})", lambda_dir_name(best));
        }
        None => eprintln!("no lambda completed"),
    }
    Ok(code)
}

#[derive(Serialize)]
struct EvalSummary {
    checkpoint: String,
    fold: Option<usize>,
    split: String,
    n_images: usize,
    accuracy: f64,
    confusion_matrix: Vec<Vec<u64>>,
    mean_confidences: Vec<Option<f64>>,
}

fn cmd_eval(cfg: &RunConfig, g: &GlobalArgs, checkpoint: &Path, fold: usize, split: SplitArg) -> Result<i32> {
    let bundle = load_weights(checkpoint, None, &OptimSettings::default(), cache_dir().as_deref())?;
    let ds = cfg.dataset()?;
    if ds.n_classes() != bundle.n_classes() {
        return Err(Error::ClassCount {
            expected: bundle.n_classes(),
            found: ds.n_classes(),
        });
    }
    let indices: Vec<usize> = match split {
        SplitArg::All => (0..ds.len()).collect(),
        s => {
            let folds = cfg.folds(&ds)?;
            let f = folds
                .folds
                .get(fold)
                .ok_or_else(|| Error::Data(format!("fold {fold} out of range ({} folds)", folds.len())))?;
            f.split(match s {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                _ => Split::Test,
            })
            .to_vec()
        }
    };
    if indices.is_empty() {
        return Err(Error::Empty("selected split".into()));
    }
    let mut records: Vec<PredictionRecord> = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(cfg.batch_size.max(1)) {
        let x = ds.batch(chunk, bundle.dtype())?;
        records.extend(predict_batch(&bundle, &x, &ds.ids(chunk), &ds.labels(chunk))?);
    }
    let acc = accuracy(&records)?;
    let cm = ConfusionMatrix::from_records(&records, ds.class_names.clone())?;
    std::fs::create_dir_all(&g.out)?;
    std::fs::write(g.out.join("predictions.csv"), predictions_csv(&records, ds.n_classes())?)?;
    std::fs::write(g.out.join("confusion.csv"), cm.to_csv()?)?;
    let summary = EvalSummary {
        checkpoint: checkpoint.display().to_string(),
        fold: (split != SplitArg::All).then_some(fold),
        split: format!("{split:?}").to_lowercase(),
        n_images: records.len(),
        accuracy: acc,
        confusion_matrix: cm.counts.clone(),
        mean_confidences: mean_confidences(&records, ds.n_classes()),
    };
    std::fs::write(g.out.join("eval.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("accuracy {acc:.4} on {} images", records.len());
    Ok(0)
}

fn cmd_transform(cfg: &RunConfig, g: &GlobalArgs, checkpoint: &Path, images: &[PathBuf]) -> Result<i32> {
    let bundle = load_weights(checkpoint, None, &OptimSettings::default(), cache_dir().as_deref())?;
    let size = cfg.image_size();
    let loaded = images
        .iter()
        .map(|p| {
            let id = p.display().to_string();
            Ok((id, crate::data::read_image(p, size)?))
        })
        .collect::<Result<Vec<_>>>()?;
    // fail early on a bad batch rather than after writing originals
    let refs: Vec<&[f32]> = loaded.iter().map(|(_, p)| p.as_slice()).collect();
    stack_images(&refs, size, bundle.dtype())?;
    let written = dump_transforms(&bundle, &loaded, size, &g.out)?;
    println!("wrote {} files to {}", written.len(), g.out.display());
    Ok(0)
}

fn cmd_synth(cfg: &RunConfig, g: &GlobalArgs) -> Result<i32> {
    let ds = RunConfig { data_dir: None, ..cfg.clone() }.dataset()?;
    for s in &ds.samples {
        let path = g.out.join(&s.image_id);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        save_png(&s.pixels, ds.image_size, &path)?;
    }
    println!("wrote {} images in {} classes to {}", ds.len(), ds.n_classes(), g.out.display());
    Ok(0)
}

/// Rows of an offline logit file: optional header; when a header is present
/// the `logit_*` columns are used (and `image_id` if any), otherwise every
/// field is a logit.
fn read_logit_rows(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut columns: Option<(Option<usize>, Vec<usize>)> = None;
    let parse = |s: &str, line: usize| -> Result<f64> {
        s.replace('\u{2212}', "-")
            .parse::<f64>()
            .map_err(|_| Error::Data(format!("{}: line {line}: {s:?} is not a number", path.display())))
    };
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 1;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if line == 1 && rec.iter().any(|f| parse(f, line).is_err()) {
            let id = rec.iter().position(|f| f == "image_id");
            let logits: Vec<usize> = rec
                .iter()
                .enumerate()
                .filter(|(_, f)| f.starts_with("logit_"))
                .map(|(i, _)| i)
                .collect();
            if logits.is_empty() {
                return Err(Error::Data(format!("{}: header has no logit_ columns", path.display())));
            }
            columns = Some((id, logits));
            continue;
        }
        let (id, values) = match &columns {
            Some((id, cols)) => (
                id.and_then(|i| rec.get(i)).unwrap_or("").to_string(),
                cols.iter()
                    .map(|&c| parse(rec.get(c).unwrap_or(""), line))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => (String::new(), rec.iter().map(|f| parse(f, line)).collect::<Result<Vec<_>>>()?),
        };
        let id = if id.is_empty() { format!("row{}", rows.len()) } else { id };
        rows.push((id, values));
    }
    Ok(rows)
}

fn cmd_fuse_offline(g: &GlobalArgs, input: &Path) -> Result<i32> {
    let rows = read_logit_rows(input)?;
    if rows.is_empty() {
        return Err(Error::Empty(format!("no logit rows in {}", input.display())));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "fused_class", "winning_logit"])?;
    for (id, values) in &rows {
        let (class, win) = fuse_flat(values).map_err(|e| Error::Data(format!("{id}: {e}")))?;
        println!("{id},{class},{win}");
        w.write_record([id.clone(), class.to_string(), win.to_string()])?;
    }
    std::fs::create_dir_all(&g.out)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    std::fs::write(g.out.join("fused.csv"), bytes)?;
    Ok(0)
}
