//! Single-file checkpoints: a safetensors container holding every named
//! tensor of a [`ModelBundle`] plus a JSON metadata block.
//!
//! Tensor name prefixes:
//!
//! | prefix | content |
//! |---|---|
//! | `generator.{k}.` | generator k parameters and batch-norm buffers |
//! | `classifier.` | classifier parameters and buffers (torchvision names) |
//! | `perceptual.` | frozen extractor weights (torchvision `features.*` names) |
//! | `optim.generator.{k}.{m,v}.` | Adam moments of generator k |
//! | `optim.classifier.{m,v}.` | Adam moments of the classifier |

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::bundle::{BundleConfig, ModelBundle, OptimSettings, RunInfo};
use super::classifier::ClassifierNet;
use crate::error::{Error, Result};
use crate::optim::{Adam, Moments};

pub const FORMAT: &str = "classfuse-checkpoint-v1";

/// Metadata block written under the safetensors `__metadata__` header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub n_classes: usize,
    pub lambda: f64,
    pub epoch: usize,
    #[serde(default)]
    pub val_loss: Option<f64>,
    pub seed: u64,
    pub config_digest: String,
    pub config: BundleConfig,
    pub optim_steps: Vec<u64>,
}

const META_KEY: &str = "classfuse";

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn push_optim(out: &mut Vec<(String, Tensor)>, prefix: &str, opt: &Adam) {
    for (name, Moments { m, v }) in &opt.state {
        out.push((format!("{prefix}.m.{name}"), m.clone()));
        out.push((format!("{prefix}.v.{name}"), v.clone()));
    }
}

pub fn save_weights(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (k, g) in bundle.generators.iter().enumerate() {
        for (name, e) in g.params().iter() {
            tensors.push((format!("generator.{k}.{name}"), e.var.as_tensor().clone()));
        }
    }
    for (name, e) in bundle.classifier.params().iter() {
        tensors.push((format!("classifier.{name}"), e.var.as_tensor().clone()));
    }
    for (name, t) in bundle.perceptual.named_tensors() {
        tensors.push((format!("perceptual.{name}"), t));
    }
    for (k, opt) in bundle.gen_opts.iter().enumerate() {
        push_optim(&mut tensors, &format!("optim.generator.{k}"), opt);
    }
    push_optim(&mut tensors, "optim.classifier", &bundle.clf_opt);

    let meta = CheckpointMeta {
        n_classes: bundle.n_classes(),
        lambda: bundle.info.lambda,
        epoch: bundle.info.epoch,
        val_loss: bundle.info.val_loss,
        seed: bundle.config.seed,
        config_digest: bundle.config.digest(),
        config: bundle.config.clone(),
        optim_steps: bundle
            .gen_opts
            .iter()
            .chain(std::iter::once(&bundle.clf_opt))
            .map(|o| o.step)
            .collect(),
    };
    // One entry only: safetensors writes the metadata map in hash order.
    let stored = Stored {
        format: FORMAT.to_string(),
        meta,
    };
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&stored)?)]);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(tensors, Some(info), path)?;
    Ok(())
}

/// Read only the metadata block.
pub fn read_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = path.as_ref();
    let buf = read_file(path)?;
    meta_from_buffer(path, &buf)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(std::fs::read(path)?)
}

fn meta_from_buffer(path: &Path, buf: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) = SafeTensors::read_metadata(buf)?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| ckpt_err(path, "no metadata block"))?;
    let raw = info.get(META_KEY).ok_or_else(|| ckpt_err(path, "not a bundle checkpoint"))?;
    let stored: Stored = serde_json::from_str(raw)?;
    if stored.format != FORMAT {
        return Err(ckpt_err(path, format!("unsupported format {:?}", stored.format)));
    }
    Ok(stored.meta)
}

/// Load a bundle. With `expected`, the stored class count and config digest
/// must match it.
pub fn load_weights(
    path: impl AsRef<Path>,
    expected: Option<&BundleConfig>,
    optim: &OptimSettings,
    cache_dir: Option<&Path>,
) -> Result<ModelBundle> {
    let path = path.as_ref();
    let buf = read_file(path)?;
    let meta = meta_from_buffer(path, &buf)?;
    if let Some(exp) = expected {
        if exp.n_classes != meta.n_classes {
            return Err(Error::ClassCount {
                expected: exp.n_classes,
                found: meta.n_classes,
            });
        }
        let want = exp.digest();
        if want != meta.config_digest {
            return Err(Error::ConfigDrift {
                expected: want,
                found: meta.config_digest,
            });
        }
    }
    if meta.config.digest() != meta.config_digest {
        return Err(ckpt_err(path, "stored config does not match its digest"));
    }
    let tensors = candle_core::safetensors::load_buffer(&buf, &Device::Cpu)?;
    let mut bundle = ModelBundle::new(&meta.config, optim, cache_dir)?;
    let take = |name: &str| -> Result<&Tensor> {
        tensors
            .get(name)
            .ok_or_else(|| ckpt_err(path, format!("missing tensor {name}")))
    };
    for (k, g) in bundle.generators.iter().enumerate() {
        for (name, e) in g.params().iter() {
            g.params().set(name, e, take(&format!("generator.{k}.{name}"))?)?;
        }
    }
    for (name, e) in bundle.classifier.params().iter() {
        bundle.classifier.params().set(name, e, take(&format!("classifier.{name}"))?)?;
    }
    for (name, t) in bundle.perceptual.named_tensors() {
        let stored = take(&format!("perceptual.{name}"))?;
        if !same_values(stored, &t)? {
            return Err(ckpt_err(path, format!("perceptual tensor {name} differs from its source")));
        }
    }
    let steps = &meta.optim_steps;
    if steps.len() != bundle.n_classes() + 1 {
        return Err(ckpt_err(path, "optimizer step count list has wrong length"));
    }
    for (k, opt) in bundle.gen_opts.iter_mut().enumerate() {
        restore_optim(opt, &tensors, &format!("optim.generator.{k}"), steps[k])?;
    }
    restore_optim(&mut bundle.clf_opt, &tensors, "optim.classifier", steps[steps.len() - 1])?;
    bundle.info = RunInfo {
        lambda: meta.lambda,
        epoch: meta.epoch,
        val_loss: meta.val_loss,
    };
    Ok(bundle)
}

fn same_values(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.dims() != b.dims() {
        return Ok(false);
    }
    let a: Vec<f64> = a.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1()?;
    let b: Vec<f64> = b.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(a == b)
}

fn restore_optim(opt: &mut Adam, tensors: &HashMap<String, Tensor>, prefix: &str, step: u64) -> Result<()> {
    opt.step = step;
    opt.state.clear();
    let names: Vec<String> = opt.param_names().cloned().collect();
    for name in names {
        let m = tensors.get(&format!("{prefix}.m.{name}"));
        let v = tensors.get(&format!("{prefix}.v.{name}"));
        if let (Some(m), Some(v)) = (m, v) {
            opt.state.insert(
                name,
                Moments {
                    m: m.clone(),
                    v: v.clone(),
                },
            );
        }
    }
    Ok(())
}

/// Outcome of loading external classifier weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainedReport {
    pub loaded: Vec<String>,
    /// Head tensors kept at their initialization because the file's class
    /// count differs (e.g. a 1000-way ImageNet head).
    pub skipped_head: Vec<String>,
    /// File entries with no counterpart in the classifier.
    pub ignored: Vec<String>,
}

/// Map an external tensor name onto the classifier's naming. Torchvision
/// names are used as-is; a `module.` prefix (DataParallel exports) is
/// stripped.
pub fn map_pretrained_name(name: &str) -> &str {
    name.strip_prefix("module.").unwrap_or(name)
}

/// Load ImageNet-layout ResNet-18 weights (safetensors, torchvision names)
/// into `clf`. Every backbone tensor must be present with a matching shape.
pub fn load_pretrained_classifier(clf: &ClassifierNet, path: impl AsRef<Path>) -> Result<PretrainedReport> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let buf = read_file(&path)?;
    let tensors = candle_core::safetensors::load_buffer(&buf, &Device::Cpu)?;
    let mut mapped: BTreeMap<&str, &Tensor> = BTreeMap::new();
    let mut report = PretrainedReport::default();
    for (name, t) in &tensors {
        let n = map_pretrained_name(name);
        if clf.params().get(n).is_some() {
            mapped.insert(n, t);
        } else {
            report.ignored.push(name.clone());
        }
    }
    for (name, e) in clf.params().iter() {
        let Some(t) = mapped.get(name.as_str()) else {
            // older exports carry no batch counters
            if name.ends_with(".num_batches_tracked") {
                continue;
            }
            return Err(ckpt_err(&path, format!("missing tensor {name}")));
        };
        if t.dims() != e.var.dims() {
            if name.starts_with("fc.") {
                report.skipped_head.push(name.clone());
                continue;
            }
            return Err(ckpt_err(
                &path,
                format!("{name}: expected {:?}, got {:?}", e.var.dims(), t.dims()),
            ));
        }
        clf.params().set(name, e, t)?;
        report.loaded.push(name.clone());
    }
    report.ignored.sort();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::classifier::ClassifierConfig;
    use candle_core::DType;

    #[test]
    fn pretrained_name_mapping() {
        assert_eq!(map_pretrained_name("module.layer1.0.conv1.weight"), "layer1.0.conv1.weight");
        assert_eq!(map_pretrained_name("fc.bias"), "fc.bias");
    }

    #[test]
    fn imagenet_head_is_skipped_backbone_loaded() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ClassifierConfig {
            width_multiplier: 1.0 / 16.0,
            seed: 1,
        };
        let src = ClassifierNet::new(&cfg, 1000, DType::F32).unwrap();
        let mut map: HashMap<String, Tensor> = src
            .params()
            .iter()
            .map(|(n, e)| (n.clone(), e.var.as_tensor().clone()))
            .collect();
        map.insert("bn1.num_batches_tracked".into(), Tensor::new(3i64, &Device::Cpu).unwrap());
        map.insert("aux.weight".into(), Tensor::new(&[1f32], &Device::Cpu).unwrap());
        let file = dir.path().join("resnet18.safetensors");
        candle_core::safetensors::save(&map, &file).unwrap();

        let dst = ClassifierNet::new(&ClassifierConfig { seed: 2, ..cfg }, 2, DType::F32).unwrap();
        let report = load_pretrained_classifier(&dst, &file).unwrap();
        assert_eq!(report.skipped_head, vec!["fc.bias", "fc.weight"]);
        assert_eq!(report.ignored, vec!["aux.weight"]);
        let n: f32 = dst.params().get("bn1.num_batches_tracked").unwrap().var.to_scalar().unwrap();
        assert_eq!(n, 3.0);
        assert_eq!(report.loaded.len(), dst.params().len() - 2);
        let a: Vec<f32> = src.params().get("conv1.weight").unwrap().var.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = dst.params().get("conv1.weight").unwrap().var.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pretrained_backbone_shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let src = ClassifierNet::new(&ClassifierConfig { width_multiplier: 0.125, seed: 1 }, 2, DType::F32).unwrap();
        let map: HashMap<String, Tensor> = src
            .params()
            .iter()
            .map(|(n, e)| (n.clone(), e.var.as_tensor().clone()))
            .collect();
        let file = dir.path().join("w.safetensors");
        candle_core::safetensors::save(&map, &file).unwrap();
        let dst = ClassifierNet::new(&ClassifierConfig { width_multiplier: 0.0625, seed: 1 }, 2, DType::F32).unwrap();
        let err = load_pretrained_classifier(&dst, &file).unwrap_err();
        assert!(err.to_string().contains("conv1.weight") || err.to_string().contains("expected"));
    }
}
