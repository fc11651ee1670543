//! Architecture registry, the level-typed predictor wrapper and checkpoint
//! persistence.

use crate::nn::{ClassifierNet, Network, Tensor, UNet};
use crate::trainer::History;
use crate::{Error, Result};
use bline_core::aggregate::Level;
use bline_core::Grid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

pub const TINY_FRAME_CNN: &str = "tiny_frame_cnn";
pub const TINY_PIXEL_UNET: &str = "tiny_pixel_unet";
pub const TINY_CLIP_CNN3D: &str = "tiny_clip_cnn3d";

/// Full-size architecture names kept free for external plug-ins.
pub const RESERVED_ARCHS: &[(&str, Level)] = &[
    ("resnet3d_18", Level::Clip),
    ("resnet2plus1d_18", Level::Clip),
    ("unet3d_encoder", Level::Clip),
    ("resnet18", Level::Frame),
    ("densenet121", Level::Frame),
    ("efficientnet_b0", Level::Frame),
    ("vit_tiny", Level::Frame),
    ("vgg16", Level::Frame),
    ("stn_cnn", Level::Frame),
    ("mobilenet_v2", Level::Frame),
    ("unet", Level::Pixel),
    ("resnet18_unet", Level::Pixel),
    ("resnet18_deeplabv3plus", Level::Pixel),
    ("densenet121_unet", Level::Pixel),
    ("efficientnet_b0_unet", Level::Pixel),
    ("efficientnet_b0_deeplabv3plus", Level::Pixel),
];

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const HISTORY_FILE: &str = "history.json";

/// Architecture hyper-parameters. Unset fields take per-architecture
/// defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Input channels; grayscale input is replicated to this many.
    pub in_channels: Option<usize>,
    /// Channel widths per stage.
    pub widths: Option<Vec<usize>>,
    /// Spatial average-pooling factor applied to the input.
    pub stem: Option<usize>,
}

impl ArchConfig {
    pub fn in_channels(&self) -> usize {
        self.in_channels.unwrap_or(1)
    }

    fn widths_or(&self, default: &[usize], n: usize) -> Result<Vec<usize>> {
        let w = self.widths.clone().unwrap_or_else(|| default.to_vec());
        if w.len() != n || w.contains(&0) {
            return Err(Error::Config(format!(
                "widths must list {n} positive channel counts, got {w:?}"
            )));
        }
        Ok(w)
    }

    fn stem_or(&self, default: usize) -> Result<usize> {
        let s = self.stem.unwrap_or(default);
        if s == 0 || !s.is_power_of_two() {
            return Err(Error::Config(format!("stem must be a power of two, got {s}")));
        }
        Ok(s)
    }

    fn check_channels(&self) -> Result<usize> {
        match self.in_channels() {
            1 | 3 => Ok(self.in_channels()),
            c => Err(Error::Config(format!("in_channels must be 1 or 3, got {c}"))),
        }
    }
}

pub type Constructor =
    Arc<dyn Fn(&ArchConfig, &mut ChaCha8Rng) -> Result<Box<dyn Network>> + Send + Sync>;

#[derive(Clone)]
pub struct ArchEntry {
    pub level: Level,
    pub build: Constructor,
}

/// Maps architecture names to constructors for one prediction level each.
#[derive(Clone)]
pub struct Registry {
    entries: BTreeMap<String, ArchEntry>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Registry {
    /// Registry holding the three tiny reference networks.
    pub fn builtin() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.insert(TINY_FRAME_CNN, Level::Frame, Arc::new(|cfg, rng| {
            let w = cfg.widths_or(&[16, 32, 64, 128], 4)?;
            let stem = cfg.stem_or(4)?;
            let c = cfg.check_channels()?;
            Ok(Box::new(ClassifierNet::new(c, &w, stem, [1, 3, 3], [1, 2, 2], rng)))
        }));
        r.insert(TINY_PIXEL_UNET, Level::Pixel, Arc::new(|cfg, rng| {
            let w = cfg.widths_or(&[8, 32, 112], 3)?;
            let stem = cfg.stem_or(2)?;
            let c = cfg.check_channels()?;
            Ok(Box::new(UNet::new(c, [w[0], w[1], w[2]], stem, rng)))
        }));
        r.insert(TINY_CLIP_CNN3D, Level::Clip, Arc::new(|cfg, rng| {
            let w = cfg.widths_or(&[16, 32, 64, 128], 4)?;
            let stem = cfg.stem_or(4)?;
            let c = cfg.check_channels()?;
            Ok(Box::new(ClassifierNet::new(c, &w, stem, [3, 3, 3], [2, 2, 2], rng)))
        }));
        r
    }

    fn insert(&mut self, name: &str, level: Level, build: Constructor) {
        self.entries.insert(name.to_string(), ArchEntry { level, build });
    }

    /// Adds a plug-in architecture. Reserved names may be claimed; built-in
    /// names may not be replaced.
    pub fn register(&mut self, name: &str, level: Level, build: Constructor) -> Result<()> {
        if [TINY_FRAME_CNN, TINY_PIXEL_UNET, TINY_CLIP_CNN3D].contains(&name) {
            return Err(Error::Config(format!("{name:?} is a built-in architecture")));
        }
        if let Some((_, l)) = RESERVED_ARCHS.iter().find(|(n, _)| *n == name) {
            if *l != level {
                return Err(Error::LevelMismatch(format!(
                    "reserved architecture {name:?} belongs to the {l} level"
                )));
            }
        }
        self.insert(name, level, build);
        Ok(())
    }

    /// Registered names for `level`, sorted.
    pub fn names(&self, level: Level) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.level == level)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn build(
        &self,
        level: Level,
        arch: &str,
        config: &ArchConfig,
        init_seed: u64,
    ) -> Result<Predictor> {
        let entry = match self.entries.get(arch) {
            Some(e) if e.level == level => e,
            Some(e) => {
                return Err(Error::LevelMismatch(format!(
                    "architecture {arch:?} predicts at the {} level, not {level}",
                    e.level
                )))
            }
            None if RESERVED_ARCHS.iter().any(|(n, _)| *n == arch) => {
                return Err(Error::ReservedArch(arch.to_string()))
            }
            None => {
                return Err(Error::UnknownArch {
                    name: arch.to_string(),
                    level: level.to_string(),
                    available: self.names(level).join(", "),
                })
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let net = (entry.build)(config, &mut rng)?;
        Ok(Predictor {
            level,
            arch: arch.to_string(),
            config: config.clone(),
            init_seed,
            net,
        })
    }
}

/// Builds a fresh predictor from the built-in registry.
pub fn build_model(level: Level, arch: &str, config: &ArchConfig, init_seed: u64) -> Result<Predictor> {
    Registry::builtin().build(level, arch, config, init_seed)
}

pub(crate) fn sigmoid(logit: f32) -> f32 {
    (1.0 / (1.0 + (-(logit as f64)).exp())) as f32
}

/// A network bound to its prediction level and input contract.
pub struct Predictor {
    pub level: Level,
    pub arch: String,
    pub config: ArchConfig,
    pub init_seed: u64,
    net: Box<dyn Network>,
}

impl std::fmt::Debug for Predictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Predictor")
            .field("level", &self.level)
            .field("arch", &self.arch)
            .field("config", &self.config)
            .field("n_params", &self.net.num_params())
            .finish()
    }
}

impl Predictor {
    pub fn network(&self) -> &dyn Network {
        self.net.as_ref()
    }

    pub fn network_mut(&mut self) -> &mut dyn Network {
        self.net.as_mut()
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// All parameters concatenated in blob order.
    pub fn flat_params(&self) -> Vec<f32> {
        self.net.params().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f32]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::Integrity(format!(
                "parameter blob holds {} values, architecture needs {n}",
                flat.len()
            )));
        }
        let mut off = 0;
        for (p, _) in self.net.params_and_grads() {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        }
        Ok(())
    }

    fn expect(&self, level: Level) -> Result<()> {
        if self.level != level {
            return Err(Error::LevelMismatch(format!(
                "{} predictor used for {level}-level input",
                self.level
            )));
        }
        Ok(())
    }

    /// Network input for a frame: `[in_channels, 1, H, W]`. This is the only
    /// place the grayscale channel is replicated.
    pub fn frame_input(&self, frame: &Grid<f32>) -> Tensor {
        replicate(frame.as_slice(), [1, frame.rows(), frame.cols()], self.config.in_channels())
    }

    /// Network input for a clip: `[in_channels, L, H, W]`.
    pub fn clip_input(&self, frames: &[Grid<f32>]) -> Result<Tensor> {
        let first = frames
            .first()
            .ok_or_else(|| bline_core::Error::InvalidInput("empty clip".into()))?;
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(frames.len() * h * w);
        for f in frames {
            if f.shape() != (h, w) {
                return Err(bline_core::Error::ShapeMismatch(format!(
                    "clip frames differ in shape: {:?} vs {:?}",
                    f.shape(),
                    (h, w)
                ))
                .into());
            }
            data.extend_from_slice(f.as_slice());
        }
        Ok(replicate(&data, [frames.len(), h, w], self.config.in_channels()))
    }

    pub fn predict_frame(&self, frame: &Grid<f32>) -> Result<f32> {
        self.expect(Level::Frame)?;
        Ok(sigmoid(self.net.forward(&self.frame_input(frame)).data[0]))
    }

    pub fn predict_clip(&self, frames: &[Grid<f32>]) -> Result<f32> {
        self.expect(Level::Clip)?;
        Ok(sigmoid(self.net.forward(&self.clip_input(frames)?).data[0]))
    }

    /// Foreground probability for every pixel, aligned with the input grid.
    pub fn predict_heatmap(&self, frame: &Grid<f32>) -> Result<Grid<f32>> {
        self.expect(Level::Pixel)?;
        let out = self.net.forward(&self.frame_input(frame));
        let [_, _, h, w] = out.shape;
        if (h, w) != frame.shape() {
            return Err(Error::LevelMismatch(format!(
                "pixel head produced {h}x{w} for a {}x{} input",
                frame.rows(),
                frame.cols()
            )));
        }
        Ok(Grid::from_vec(h, w, out.data.into_iter().map(sigmoid).collect()))
    }
}

fn replicate(single: &[f32], dhw: [usize; 3], channels: usize) -> Tensor {
    let mut data = Vec::with_capacity(single.len() * channels);
    for _ in 0..channels {
        data.extend_from_slice(single);
    }
    Tensor::from_vec([channels, dhw[0], dhw[1], dhw[2]], data)
}

/// Contents of `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model_id: String,
    pub level: Level,
    pub arch: String,
    pub arch_config: ArchConfig,
    pub init_seed: u64,
    pub fold: Option<usize>,
    pub n_params: usize,
    pub weights_sha256: String,
}

/// Trained parameters plus provenance.
#[derive(Debug)]
pub struct ModelCheckpoint {
    pub model_id: String,
    pub fold: Option<usize>,
    pub predictor: Predictor,
    pub history: History,
}

impl ModelCheckpoint {
    pub fn level(&self) -> Level {
        self.predictor.level
    }
}

fn encode_weights(params: &[f32]) -> Vec<u8> {
    params.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let blob = encode_weights(&ckpt.predictor.flat_params());
    let p = &ckpt.predictor;
    let config = CheckpointConfig {
        model_id: ckpt.model_id.clone(),
        level: p.level,
        arch: p.arch.clone(),
        arch_config: p.config.clone(),
        init_seed: p.init_seed,
        fold: ckpt.fold,
        n_params: p.num_params(),
        weights_sha256: digest(&blob),
    };
    std::fs::write(dir.join(WEIGHTS_FILE), &blob)?;
    std::fs::write(dir.join(CONFIG_FILE), serde_json::to_vec_pretty(&config)?)?;
    std::fs::write(dir.join(HISTORY_FILE), serde_json::to_vec_pretty(&ckpt.history)?)?;
    Ok(())
}

pub fn read_checkpoint_config(dir: &Path) -> Result<CheckpointConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = std::fs::read(&path).map_err(|e| {
        Error::Integrity(format!("cannot read {}: {e}", path.display()))
    })?;
    serde_json::from_slice(&text)
        .map_err(|e| Error::Integrity(format!("malformed {}: {e}", path.display())))
}

/// Loads a checkpoint with the built-in registry. When `expected` is given
/// the stored level must match.
pub fn load_checkpoint(dir: &Path, expected: Option<Level>) -> Result<ModelCheckpoint> {
    load_checkpoint_with(&Registry::builtin(), dir, expected)
}

pub fn load_checkpoint_with(
    registry: &Registry,
    dir: &Path,
    expected: Option<Level>,
) -> Result<ModelCheckpoint> {
    let config = read_checkpoint_config(dir)?;
    if let Some(level) = expected {
        if level != config.level {
            return Err(Error::LevelMismatch(format!(
                "checkpoint {} holds a {}-level model, expected {level}",
                dir.display(),
                config.level
            )));
        }
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let blob = std::fs::read(&wpath)
        .map_err(|e| Error::Integrity(format!("cannot read {}: {e}", wpath.display())))?;
    let actual = digest(&blob);
    if actual != config.weights_sha256 {
        return Err(Error::Integrity(format!(
            "{} digest {actual} does not match recorded {}",
            wpath.display(),
            config.weights_sha256
        )));
    }
    if blob.len() != 4 * config.n_params {
        return Err(Error::Integrity(format!(
            "{} holds {} bytes, expected {}",
            wpath.display(),
            blob.len(),
            4 * config.n_params
        )));
    }
    let hpath = dir.join(HISTORY_FILE);
    let history: History = serde_json::from_slice(
        &std::fs::read(&hpath)
            .map_err(|e| Error::Integrity(format!("cannot read {}: {e}", hpath.display())))?,
    )
    .map_err(|e| Error::Integrity(format!("malformed {}: {e}", hpath.display())))?;
    let mut predictor =
        registry.build(config.level, &config.arch, &config.arch_config, config.init_seed)?;
    let params: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    predictor.set_flat_params(&params)?;
    Ok(ModelCheckpoint {
        model_id: config.model_id,
        fold: config.fold,
        predictor,
        history,
    })
}
