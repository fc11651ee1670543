use bline_core::aggregate::Level;
use bline_core::Grid;
use std::sync::Arc;

use bline_models::nn::ClassifierNet;
use bline_models::nn::Network;
use bline_models::zoo::{
    ArchConfig, Constructor, Registry, CONFIG_FILE, RESERVED_ARCHS, TINY_CLIP_CNN3D, TINY_FRAME_CNN, TINY_PIXEL_UNET,
    WEIGHTS_FILE,
};
use bline_models::{build_model, load_checkpoint, save_checkpoint, Error, Predictor};
use bline_models::trainer::History;
use bline_models::zoo::ModelCheckpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: usize = 256;
const W: usize = 384;

fn noise_frame(seed: u64) -> Grid<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid::from_fn(H, W, |_, _| rng.random_range(0.0..1.0))
}

fn model(level: Level, arch: &str, seed: u64) -> Predictor {
    build_model(level, arch, &ArchConfig::default(), seed).unwrap()
}

#[test]
fn unknown_arch_lists_alternatives() {
    let err = build_model(Level::Frame, "no_such_net", &ArchConfig::default(), 0).unwrap_err();
    match err {
        Error::UnknownArch { available, .. } => assert!(available.contains(TINY_FRAME_CNN)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn reserved_arch_is_rejected() {
    let (name, level) = RESERVED_ARCHS[0];
    let err = build_model(level, name, &ArchConfig::default(), 0).unwrap_err();
    assert!(matches!(err, Error::ReservedArch(_)), "{err:?}");
}

#[test]
fn level_mismatch_is_rejected() {
    let err = build_model(Level::Clip, TINY_FRAME_CNN, &ArchConfig::default(), 0).unwrap_err();
    assert!(matches!(err, Error::LevelMismatch(_)), "{err:?}");
    let frame = model(Level::Frame, TINY_FRAME_CNN, 0);
    assert!(matches!(frame.predict_heatmap(&noise_frame(0)), Err(Error::LevelMismatch(_))));
}

#[test]
fn bad_arch_config_is_rejected() {
    let cfg = ArchConfig {
        in_channels: Some(2),
        ..ArchConfig::default()
    };
    assert!(build_model(Level::Frame, TINY_FRAME_CNN, &cfg, 0).is_err());
    let cfg = ArchConfig {
        widths: Some(vec![8, 16]),
        ..ArchConfig::default()
    };
    assert!(build_model(Level::Pixel, TINY_PIXEL_UNET, &cfg, 0).is_err());
}

#[test]
fn output_contracts() {
    let frame = noise_frame(1);
    let f = model(Level::Frame, TINY_FRAME_CNN, 1).predict_frame(&frame).unwrap();
    assert!((0.0..=1.0).contains(&f));

    let map = model(Level::Pixel, TINY_PIXEL_UNET, 1).predict_heatmap(&frame).unwrap();
    assert_eq!(map.shape(), (H, W));
    assert!(map.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));

    let clip: Vec<Grid<f32>> = (0..16).map(noise_frame).collect();
    let c = model(Level::Clip, TINY_CLIP_CNN3D, 1).predict_clip(&clip).unwrap();
    assert!((0.0..=1.0).contains(&c));
}

#[test]
fn parameter_budgets() {
    let n = |level, arch| model(level, arch, 0).num_params();
    let frame = n(Level::Frame, TINY_FRAME_CNN);
    let pixel = n(Level::Pixel, TINY_PIXEL_UNET);
    let clip = n(Level::Clip, TINY_CLIP_CNN3D);
    assert!((70_000..=130_000).contains(&frame), "{frame}");
    assert!((150_000..=250_000).contains(&pixel), "{pixel}");
    assert!((220_000..=380_000).contains(&clip), "{clip}");
}

#[test]
fn initialization_is_seeded() {
    for (level, arch) in [
        (Level::Frame, TINY_FRAME_CNN),
        (Level::Pixel, TINY_PIXEL_UNET),
        (Level::Clip, TINY_CLIP_CNN3D),
    ] {
        let a = model(level, arch, 11).flat_params();
        let b = model(level, arch, 11).flat_params();
        let c = model(level, arch, 12).flat_params();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

#[test]
fn channel_replication_happens_once() {
    let frame = noise_frame(3);
    let grey = model(Level::Frame, TINY_FRAME_CNN, 0);
    assert_eq!(grey.frame_input(&frame).shape, [1, 1, H, W]);

    let cfg = ArchConfig {
        in_channels: Some(3),
        ..ArchConfig::default()
    };
    let rgb = build_model(Level::Frame, TINY_FRAME_CNN, &cfg, 0).unwrap();
    let x = rgb.frame_input(&frame);
    assert_eq!(x.shape, [3, 1, H, W]);
    let plane = H * W;
    assert_eq!(&x.data[..plane], frame.as_slice());
    assert_eq!(&x.data[plane..2 * plane], frame.as_slice());
    assert_eq!(&x.data[2 * plane..], frame.as_slice());
    assert!((0.0..=1.0).contains(&rgb.predict_frame(&frame).unwrap()));
}

#[test]
fn custom_architectures_can_be_registered() {
    let mut registry = Registry::builtin();
    let ctor: Constructor = Arc::new(|cfg, rng| {
        let net = ClassifierNet::new(cfg.in_channels(), &[4, 8], 8, [1, 3, 3], [1, 2, 2], rng);
        Ok(Box::new(net) as Box<dyn Network>)
    });
    registry.register("my_frame_net", Level::Frame, ctor.clone()).unwrap();
    assert!(registry.names(Level::Frame).contains(&"my_frame_net"));
    assert!(registry.register(TINY_FRAME_CNN, Level::Frame, ctor.clone()).is_err());

    let (reserved, level) = RESERVED_ARCHS[0];
    let other = Level::ALL.into_iter().find(|l| *l != level).unwrap();
    assert!(matches!(registry.register(reserved, other, ctor.clone()), Err(Error::LevelMismatch(_))));

    let p = registry.build(Level::Frame, "my_frame_net", &ArchConfig::default(), 5).unwrap();
    let q = registry.build(Level::Frame, "my_frame_net", &ArchConfig::default(), 5).unwrap();
    assert_eq!(p.flat_params(), q.flat_params());
    assert!((0.0..=1.0).contains(&p.predict_frame(&noise_frame(9)).unwrap()));
}

fn checkpoint(level: Level, arch: &str) -> ModelCheckpoint {
    ModelCheckpoint {
        model_id: format!("{arch}_test"),
        fold: Some(2),
        predictor: model(level, arch, 21),
        history: History::default(),
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(Level::Pixel, TINY_PIXEL_UNET);
    save_checkpoint(&ckpt, dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path(), Some(Level::Pixel)).unwrap();
    assert_eq!(loaded.model_id, ckpt.model_id);
    assert_eq!(loaded.fold, Some(2));
    assert_eq!(loaded.predictor.flat_params(), ckpt.predictor.flat_params());
    let frame = noise_frame(4);
    assert_eq!(
        loaded.predictor.predict_heatmap(&frame).unwrap(),
        ckpt.predictor.predict_heatmap(&frame).unwrap()
    );
}

#[test]
fn checkpoint_level_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&checkpoint(Level::Frame, TINY_FRAME_CNN), dir.path()).unwrap();
    let err = load_checkpoint(dir.path(), Some(Level::Pixel)).unwrap_err();
    assert!(matches!(err, Error::LevelMismatch(_)), "{err:?}");
}

#[test]
fn tampered_weights_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&checkpoint(Level::Frame, TINY_FRAME_CNN), dir.path()).unwrap();
    let path = dir.path().join(WEIGHTS_FILE);
    let mut blob = std::fs::read(&path).unwrap();
    blob[100] ^= 0x01;
    std::fs::write(&path, &blob).unwrap();
    let err = load_checkpoint(dir.path(), None).unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err:?}");
}

#[test]
fn malformed_config_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&checkpoint(Level::Frame, TINY_FRAME_CNN), dir.path()).unwrap();
    std::fs::write(dir.path().join(CONFIG_FILE), b"{ not json").unwrap();
    assert!(load_checkpoint(dir.path(), None).is_err());
}
