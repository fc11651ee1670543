use bline_core::aggregate::{Aggregation, Level};
use bline_core::data::{build_patient_split, Dataset, SplitManifest};
use bline_core::phantom::{generate_dataset, DatasetConfig};
use bline_models::augment::AugmentationPolicy;
use bline_models::inference::{predict_video, InferenceConfig};
use bline_models::trainer::{build_units, train, videos_of, TrainConfig, UnitSelection};
use bline_models::zoo::{ArchConfig, TINY_CLIP_CNN3D, TINY_FRAME_CNN, TINY_PIXEL_UNET};
use bline_models::{build_model, Error};

fn small_dataset(frames: usize) -> (Dataset, SplitManifest) {
    let mut cfg = DatasetConfig::new(12, 2, 0.5, 5);
    cfg.frames_per_video = Some(frames);
    let (dataset, _) = generate_dataset(&cfg).unwrap();
    let split = build_patient_split(&dataset.patient_ids(), 5).unwrap();
    (dataset, split)
}

fn quick_config(level: Level, arch: &str) -> TrainConfig {
    let mut cfg = TrainConfig::new(level, arch, "quick");
    cfg.max_epochs = 2;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-3;
    cfg.augmentation = AugmentationPolicy::default();
    cfg.seed = 17;
    cfg
}

#[test]
fn training_is_reproducible() {
    let (dataset, split) = small_dataset(8);
    let cfg = quick_config(Level::Frame, TINY_FRAME_CNN);
    let a = train(&cfg, &dataset, &split, 1).unwrap();
    let b = train(&cfg, &dataset, &split, 1).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.predictor.flat_params(), b.predictor.flat_params());
    assert_eq!(a.history.epochs.len(), 2);
    assert!(a.history.epochs.iter().all(|e| e.train_loss.is_finite() && e.val_loss.is_finite()));

    let mut other = cfg.clone();
    other.seed = 18;
    let c = train(&other, &dataset, &split, 1).unwrap();
    assert_ne!(a.predictor.flat_params(), c.predictor.flat_params());
}

#[test]
fn checkpoint_holds_the_best_epoch() {
    let (dataset, split) = small_dataset(8);
    let mut cfg = quick_config(Level::Frame, TINY_FRAME_CNN);
    cfg.max_epochs = 3;
    let ckpt = train(&cfg, &dataset, &split, 0).unwrap();
    let best = ckpt.history.best_epoch.unwrap();
    let best_loss = ckpt.history.best_val_loss.unwrap();
    assert_eq!(ckpt.history.epochs[best - 1].val_loss, best_loss);
    assert!(ckpt.history.epochs.iter().all(|e| e.val_loss >= best_loss));
    assert_eq!(ckpt.fold, Some(0));
}

#[test]
fn pixel_and_clip_training_smoke() {
    let (dataset, split) = small_dataset(16);
    for (level, arch) in [(Level::Pixel, TINY_PIXEL_UNET), (Level::Clip, TINY_CLIP_CNN3D)] {
        let mut cfg = quick_config(level, arch);
        cfg.max_epochs = 1;
        cfg.batch_size = 2;
        let ckpt = train(&cfg, &dataset, &split, 2).unwrap();
        assert_eq!(ckpt.history.epochs.len(), 1);
        assert!(ckpt.history.epochs[0].val_loss.is_finite());
    }
}

#[test]
fn config_errors_surface_before_training() {
    let (dataset, split) = small_dataset(8);
    let mut cfg = quick_config(Level::Frame, TINY_FRAME_CNN);
    cfg.lr_halving_patience = 20;
    assert!(matches!(train(&cfg, &dataset, &split, 0), Err(Error::Config(_)) | Err(Error::Core(_))));
    let cfg = quick_config(Level::Frame, "nope");
    assert!(matches!(train(&cfg, &dataset, &split, 0), Err(Error::UnknownArch { .. })));
    let cfg = quick_config(Level::Frame, TINY_FRAME_CNN);
    assert!(train(&cfg, &dataset, &split, 5).is_err());
}

#[test]
fn training_units_are_balanced() {
    let (dataset, split) = small_dataset(8);
    let videos = videos_of(&dataset, &split.training_patients(0));
    for level in [Level::Frame, Level::Clip] {
        let units = build_units(&dataset, &videos, level, 4, UnitSelection::Training).unwrap();
        let pos: f64 = units.positives.iter().map(|u| units.weights[u]).sum();
        let neg: f64 = units.negatives.iter().map(|u| units.weights[u]).sum();
        assert!(!units.positives.is_empty() && !units.negatives.is_empty());
        assert!((pos - neg).abs() <= 1e-9 * pos.max(neg), "{level}: {pos} vs {neg}");
    }
}

#[test]
fn ensemble_of_identical_copies_is_exact() {
    let (dataset, _) = small_dataset(20);
    let cfg = InferenceConfig {
        aggregation: Aggregation::MaxMovingAverage(3),
        clip_length: 8,
        ..InferenceConfig::default()
    };
    let video = dataset.videos.iter().find(|v| v.label).unwrap();
    for (level, arch) in [
        (Level::Frame, TINY_FRAME_CNN),
        (Level::Clip, TINY_CLIP_CNN3D),
        (Level::Pixel, TINY_PIXEL_UNET),
    ] {
        let model = build_model(level, arch, &ArchConfig::default(), 3).unwrap();
        let single = predict_video(&[&model], video, "m", Some("test"), &cfg).unwrap();
        let five = predict_video(&[&model; 5], video, "m", Some("test"), &cfg).unwrap();
        assert_eq!(single, five, "{level}");
    }
}

#[test]
fn mixed_level_ensembles_are_rejected() {
    let (dataset, _) = small_dataset(8);
    let a = build_model(Level::Frame, TINY_FRAME_CNN, &ArchConfig::default(), 0).unwrap();
    let b = build_model(Level::Pixel, TINY_PIXEL_UNET, &ArchConfig::default(), 0).unwrap();
    let err = predict_video(&[&a, &b], &dataset.videos[0], "m", None, &InferenceConfig::default()).unwrap_err();
    assert!(matches!(err, Error::LevelMismatch(_)));
}
