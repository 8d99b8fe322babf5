//! Stratified 80:20 train/test folds with a validation split carved from
//! each fold's training part.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::nets::params::derive_seed;

pub const TEST_FRACTION: f64 = 0.2;
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Sample indices (into [`Dataset::samples`]) of one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Fold {
    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplits {
    pub folds: Vec<Fold>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    fold: usize,
    split: Split,
    image_id: String,
}

impl FoldSplits {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// JSON manifest: a list of `{fold, split, image_id}` rows.
    pub fn to_manifest(&self, ds: &Dataset) -> Result<String> {
        let mut rows = Vec::new();
        for (f, fold) in self.folds.iter().enumerate() {
            for split in [Split::Train, Split::Val, Split::Test] {
                for &i in fold.split(split) {
                    rows.push(ManifestRow {
                        fold: f,
                        split,
                        image_id: ds.samples[i].image_id.clone(),
                    });
                }
            }
        }
        Ok(serde_json::to_string_pretty(&rows)?)
    }

    pub fn from_manifest(json: &str, ds: &Dataset) -> Result<Self> {
        let rows: Vec<ManifestRow> = serde_json::from_str(json)?;
        let n_folds = rows.iter().map(|r| r.fold + 1).max().unwrap_or(0);
        let mut folds = vec![
            Fold {
                train: vec![],
                val: vec![],
                test: vec![]
            };
            n_folds
        ];
        for r in rows {
            let i = ds
                .index_of(&r.image_id)
                .ok_or_else(|| Error::Data(format!("manifest image {} not in dataset", r.image_id)))?;
            let f = &mut folds[r.fold];
            match r.split {
                Split::Train => f.train.push(i),
                Split::Val => f.val.push(i),
                Split::Test => f.test.push(i),
            }
        }
        Ok(Self { folds, seed: 0 })
    }
}

fn round_count(n: usize, frac: f64) -> usize {
    (n as f64 * frac).round() as usize
}

/// Stratified folds. Each class is shuffled once with `seed`; fold `f` takes
/// the f-th 20% block of every class as its test part (blocks rotate, so
/// test sets of different folds are disjoint while they fit). From the
/// remaining 80%, 10% per class is drawn as validation with seed
/// `seed + f`.
pub fn make_folds(ds: &Dataset, n_folds: usize, seed: u64) -> Result<FoldSplits> {
    if n_folds == 0 {
        return Err(Error::config("n_folds", "must be >= 1"));
    }
    let by_class = ds.by_class();
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < n_folds.max(2) {
            return Err(Error::Data(format!(
                "class {} has {} samples, needs at least {}",
                ds.class_names[c],
                members.len(),
                n_folds.max(2)
            )));
        }
    }
    let shuffled: Vec<Vec<usize>> = by_class
        .iter()
        .enumerate()
        .map(|(c, members)| {
            let mut m = members.clone();
            m.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("class.{c}"))));
            m
        })
        .collect();

    let mut folds = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let mut fold = Fold {
            train: vec![],
            val: vec![],
            test: vec![],
        };
        for (c, members) in shuffled.iter().enumerate() {
            let n = members.len();
            let n_test = round_count(n, TEST_FRACTION).clamp(1, n - 1);
            let start = (f * n_test) % n;
            let test: HashSet<usize> = (0..n_test).map(|i| members[(start + i) % n]).collect();
            let mut rest: Vec<usize> = members.iter().copied().filter(|i| !test.contains(i)).collect();
            rest.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                seed.wrapping_add(f as u64),
                &format!("val.{c}"),
            )));
            let n_val = round_count(rest.len(), VAL_FRACTION).min(rest.len().saturating_sub(1));
            fold.val.extend_from_slice(&rest[..n_val]);
            fold.train.extend_from_slice(&rest[n_val..]);
            let mut test: Vec<usize> = test.into_iter().collect();
            test.sort_unstable();
            fold.test.extend(test);
        }
        fold.train.sort_unstable();
        fold.val.sort_unstable();
        fold.test.sort_unstable();
        folds.push(fold);
    }
    Ok(FoldSplits { folds, seed })
}
