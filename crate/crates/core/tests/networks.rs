mod common;

use candle_core::{DType, Device, Tensor};
use classfuse::losses::LabelBatch;
use classfuse::nets::{
    load_weights, read_meta, save_weights, BnMode, BundleConfig, ModelBundle, OptimSettings, PerceptualConfig,
    PerceptualNet, PerceptualSource, Precision, TapLayer,
};
use classfuse::trainer::{classifier_step, generator_step, TrainConfig};
use classfuse::Error;
use common::{micro_bundle, random_images, store_bits};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trained_micro(n: usize) -> ModelBundle {
    let mut bundle = micro_bundle(n, 3, Precision::F32);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_images(&mut rng, (4, 8, 8), DType::F32);
    let labels = LabelBatch::new((0..4).map(|i| i % n).collect(), n).unwrap();
    let cfg = TrainConfig { n_classes: n, ..Default::default() };
    classifier_step(&mut bundle, &cfg, &x, &labels, 1e-3).unwrap();
    generator_step(&mut bundle, &cfg, &x, &labels).unwrap();
    bundle.info.lambda = 0.05;
    bundle.info.epoch = 4;
    bundle.info.val_loss = Some(0.25);
    bundle
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let bundle = trained_micro(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_weights(&bundle, &path).unwrap();

    let meta = read_meta(&path).unwrap();
    assert_eq!((meta.n_classes, meta.lambda, meta.epoch, meta.seed), (3, 0.05, 4, 3));
    assert_eq!(meta.val_loss, Some(0.25));
    assert_eq!(meta.config_digest, bundle.config.digest());
    assert_eq!(meta.optim_steps, vec![1, 1, 1, 1]);

    let loaded = load_weights(&path, Some(&bundle.config), &OptimSettings::default(), None).unwrap();
    for k in 0..3 {
        assert_eq!(store_bits(loaded.generators[k].params()), store_bits(bundle.generators[k].params()));
    }
    assert_eq!(store_bits(loaded.classifier.params()), store_bits(bundle.classifier.params()));
    assert_eq!(loaded.info, bundle.info);

    // Saving the loaded bundle reproduces the file, optimizer moments included.
    let again = dir.path().join("b.ckpt");
    save_weights(&loaded, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn checkpoint_class_count_mismatch_rejected() {
    let bundle = trained_micro(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n3.ckpt");
    save_weights(&bundle, &path).unwrap();
    let err = load_weights(&path, Some(&BundleConfig::micro(2, 3)), &OptimSettings::default(), None).unwrap_err();
    assert!(matches!(err, Error::ClassCount { expected: 2, found: 3 }), "{err}");
}

#[test]
fn checkpoint_config_drift_rejected() {
    let bundle = trained_micro(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_weights(&bundle, &path).unwrap();
    let mut other = bundle.config.clone();
    other.generator.base_channels = 8;
    let err = load_weights(&path, Some(&other), &OptimSettings::default(), None).unwrap_err();
    assert!(matches!(err, Error::ConfigDrift { .. }), "{err}");

    // A different seed alone is not drift.
    let reseeded = BundleConfig { seed: 99, ..bundle.config.clone() };
    load_weights(&path, Some(&reseeded), &OptimSettings::default(), None).unwrap();
}

#[test]
fn missing_checkpoint_names_path() {
    let err = load_weights("/nonexistent/x.ckpt", None, &OptimSettings::default(), None).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/x.ckpt"));
}

#[test]
fn foreign_safetensors_file_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plain.safetensors");
    let t = Tensor::zeros((2, 2), DType::F32, &Device::Cpu).unwrap();
    candle_core::safetensors::save(&[("w".to_string(), t)].into_iter().collect(), &path).unwrap();
    assert!(matches!(read_meta(&path).unwrap_err(), Error::Checkpoint { .. }));
}

#[test]
fn tap_layer_shapes_at_64() {
    // Documented in the networks chapter of the guide.
    let expected = [
        (TapLayer::Relu1_2, [1, 64, 64, 64]),
        (TapLayer::Relu2_2, [1, 128, 32, 32]),
        (TapLayer::Relu3_3, [1, 256, 16, 16]),
        (TapLayer::Relu4_3, [1, 512, 8, 8]),
        (TapLayer::Relu5_3, [1, 512, 4, 4]),
    ];
    let x = random_images(&mut ChaCha8Rng::seed_from_u64(7), (1, 64, 64), DType::F32);
    for (tap, dims) in expected {
        let cfg = PerceptualConfig {
            tap_layer: tap,
            source: PerceptualSource::FixedSeedRandom { seed: 7 },
            width_multiplier: 1.0,
        };
        let net = PerceptualNet::new(&cfg, DType::F32, None).unwrap();
        let f = net.features(&x).unwrap();
        assert_eq!(f.dims(), &dims, "{}", tap.name());
        let (c, h, w) = cfg.feature_shape(64, 64);
        assert_eq!([1, c, h, w], dims);
    }
}

#[test]
fn generators_preserve_shape_and_classifier_arity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [2, 3, 5] {
        let bundle = micro_bundle(n, 1, Precision::F32);
        for (h, w) in [(8, 8), (12, 16)] {
            let x = random_images(&mut rng, (2, h, w), DType::F32);
            for g in &bundle.generators {
                assert_eq!(g.forward(&x, BnMode::Eval).unwrap().dims(), x.dims());
            }
            assert_eq!(bundle.classifier.forward(&x, BnMode::Eval).unwrap().dims(), &[2, n]);
        }
    }
}

#[test]
fn perceptual_net_never_changes_under_training() {
    let mut bundle = micro_bundle(2, 4, Precision::F32);
    let before = bundle.perceptual.named_tensors();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = TrainConfig::default();
    for _ in 0..3 {
        let x = random_images(&mut rng, (4, 8, 8), DType::F32);
        let labels = LabelBatch::new(vec![0, 1, 1, 0], 2).unwrap();
        classifier_step(&mut bundle, &cfg, &x, &labels, 1e-3).unwrap();
        generator_step(&mut bundle, &cfg, &x, &labels).unwrap();
    }
    let after = bundle.perceptual.named_tensors();
    for (name, t) in &before {
        assert_eq!(common::to_vec(t), common::to_vec(&after[name]), "{name}");
    }
}
