mod common;

use std::collections::BTreeMap;

use candle_core::DType;
use classfuse::data::{synth_dataset, Dataset, SynthSpec};
use classfuse::losses::LabelBatch;
use classfuse::nets::{BundleConfig, ModelBundle, ParamStore, Precision};
use classfuse::trainer::{classifier_step, generator_step, train_epoch, TrainConfig, TrainState};
use common::{micro_bundle, random_images, store_bits, store_values};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trainable_bits(store: &ParamStore) -> BTreeMap<String, Vec<u64>> {
    let names: Vec<String> = store.trainable().map(|(n, _)| n.clone()).collect();
    store_bits(store).into_iter().filter(|(n, _)| names.contains(n)).collect()
}

fn changed(before: &BTreeMap<String, Vec<u64>>, after: &BTreeMap<String, Vec<u64>>) -> Vec<String> {
    before.iter().filter(|(n, v)| after[*n] != **v).map(|(n, _)| n.clone()).collect()
}

fn batch(seed: u64, labels: Vec<usize>, n: usize) -> (candle_core::Tensor, LabelBatch) {
    let x = random_images(&mut ChaCha8Rng::seed_from_u64(seed), (labels.len(), 8, 8), DType::F64);
    (x, LabelBatch::new(labels, n).unwrap())
}

fn synth(per_class: usize, size: usize, seed: u64) -> Dataset {
    synth_dataset(
        &SynthSpec {
            n_classes: 2,
            images_per_class: per_class,
            size: (size, size),
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

#[test]
fn classifier_step_leaves_generators_alone() {
    let mut bundle = micro_bundle(3, 1, Precision::F64);
    let gens: Vec<_> = bundle.generators.iter().map(|g| store_bits(g.params())).collect();
    let clf = trainable_bits(bundle.classifier.params());
    let (x, labels) = batch(1, vec![0, 1, 2, 1], 3);
    classifier_step(&mut bundle, &TrainConfig::default(), &x, &labels, 1e-3).unwrap();
    for (g, before) in bundle.generators.iter().zip(&gens) {
        // Buffers included: batch statistics only, running stats untouched.
        assert_eq!(&store_bits(g.params()), before);
    }
    let moved = changed(&clf, &trainable_bits(bundle.classifier.params()));
    assert_eq!(moved.len(), clf.len(), "unchanged classifier tensors");
}

#[test]
fn head_only_fine_tuning_moves_only_fc() {
    let cfg = TrainConfig {
        fine_tune_only_head: true,
        ..Default::default()
    };
    let mut bundle = ModelBundle::new(
        &BundleConfig {
            precision: Precision::F64,
            ..BundleConfig::micro(2, 2)
        },
        &cfg.optim_settings(),
        None,
    )
    .unwrap();
    let before = trainable_bits(bundle.classifier.params());
    let (x, labels) = batch(2, vec![0, 1, 0, 1], 2);
    classifier_step(&mut bundle, &cfg, &x, &labels, 1e-3).unwrap();
    let mut moved = changed(&before, &trainable_bits(bundle.classifier.params()));
    moved.sort();
    assert_eq!(moved, vec!["fc.bias".to_string(), "fc.weight".to_string()]);
}

#[test]
fn classifier_overfits_one_batch() {
    let mut bundle = micro_bundle(2, 3, Precision::F32);
    let (x, labels) = batch(3, vec![0, 1, 1, 0, 1, 0], 2);
    let x = x.to_dtype(DType::F32).unwrap();
    let cfg = TrainConfig::default();
    let losses: Vec<f64> = (0..50)
        .map(|_| classifier_step(&mut bundle, &cfg, &x, &labels, 1e-3).unwrap().loss)
        .collect();
    assert!(losses[49] < 0.5 * losses[0], "{:?}", &losses[..5]);
}

#[test]
fn generator_step_leaves_classifier_alone() {
    let mut bundle = micro_bundle(2, 4, Precision::F64);
    let clf = store_bits(bundle.classifier.params());
    let gens: Vec<_> = bundle.generators.iter().map(|g| trainable_bits(g.params())).collect();
    let (x, labels) = batch(4, vec![0, 1, 1], 2);
    let out = generator_step(&mut bundle, &TrainConfig::default(), &x, &labels).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(store_bits(bundle.classifier.params()), clf);
    for (g, before) in bundle.generators.iter().zip(&gens) {
        assert!(!changed(before, &trainable_bits(g.params())).is_empty());
    }
}

#[test]
fn large_lambda_routed_term_dominates() {
    let mut bundle = micro_bundle(2, 5, Precision::F64);
    let cfg = TrainConfig {
        lambda: 1e3,
        ..Default::default()
    };
    let (x, labels) = batch(5, vec![1; 4], 2);
    let out = generator_step(&mut bundle, &cfg, &x, &labels).unwrap();
    let b = out[1];
    assert!(b.lambda * b.l_ce_routed / b.total > 0.99, "{b:?}");
    // Generator 0 has no image of its class.
    assert_eq!(out[0].l_ce_routed, 0.0);
}

#[test]
fn zero_lambda_updates_ignore_labels() {
    let cfg = TrainConfig {
        lambda: 0.0,
        ..Default::default()
    };
    let (x, labels) = batch(6, vec![0, 1, 1, 0], 2);
    let swapped = LabelBatch::new(labels.labels().iter().map(|l| 1 - l).collect(), 2).unwrap();
    let mut a = micro_bundle(2, 6, Precision::F64);
    let mut b = micro_bundle(2, 6, Precision::F64);
    generator_step(&mut a, &cfg, &x, &labels).unwrap();
    generator_step(&mut b, &cfg, &x, &swapped).unwrap();
    for k in 0..2 {
        assert_eq!(store_values(a.generators[k].params()), store_values(b.generators[k].params()));
    }
}

#[test]
fn epoch_of_800_in_batches_of_32() {
    let ds = synth(400, 8, 1);
    let train: Vec<usize> = (0..800).collect();
    let mut bundle = micro_bundle(2, 7, Precision::F32);
    let cfg = TrainConfig::default();
    let out = train_epoch(&mut bundle, &cfg, &ds, &train, 0, 0).unwrap();
    assert_eq!(out.batches, 25);
    assert_eq!(out.losses.len(), 25 * 2);
    assert_eq!(out.lr_clf, 1e-3);
}

#[test]
fn trailing_single_image_is_dropped() {
    let ds = synth(20, 8, 2);
    let train: Vec<usize> = (0..33).collect();
    let mut bundle = micro_bundle(2, 8, Precision::F32);
    let out = train_epoch(&mut bundle, &TrainConfig::default(), &ds, &train, 0, 0).unwrap();
    assert_eq!(out.batches, 1);
}

#[test]
fn same_seed_same_history() {
    let ds = synth(12, 8, 3);
    let train: Vec<usize> = (0..18).collect();
    let val: Vec<usize> = (18..24).collect();
    let cfg = TrainConfig {
        batch_size: 6,
        seed: 9,
        ..Default::default()
    };
    let run = || {
        let mut state = TrainState::new(micro_bundle(2, 9, Precision::F32), cfg.patience);
        for _ in 0..3 {
            state.advance(&cfg, &ds, &train, &val).unwrap();
        }
        state
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history.len(), 3);
    assert_eq!(a.history, b.history);
    assert_eq!(a.losses, b.losses);
    assert_eq!(store_bits(a.bundle.classifier.params()), store_bits(b.bundle.classifier.params()));
    let epochs: Vec<usize> = a.history.iter().map(|m| m.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3]);
}
