//! Training loop: unit construction, weighted batches, the learning-rate
//! schedule with early stopping, and cross-validation over the five folds.

use crate::augment::{augment, AugmentationPolicy, Sample};
use crate::nn::Tensor;
use crate::optim::Adam;
use crate::zoo::{sigmoid, ArchConfig, ModelCheckpoint, Predictor, Registry};
use crate::{Error, Result};
use bline_core::aggregate::Level;
use bline_core::data::{
    clip_starts, compute_sample_weights, make_epoch_schedule, pad_to_length, ClipMode, Dataset,
    LusVideo, Point, Polarity, SplitManifest, Unit, UnitId, N_FOLDS,
};
use bline_core::labelmap::render_label_map;
use bline_core::objectives::{bce_grad, bce_loss, seg_loss, seg_loss_grad, LossConfig};
use bline_core::{Grid, CLIP_LENGTH};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

/// Minimum decrease of the validation loss that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub level: Level,
    pub arch: String,
    #[serde(default)]
    pub arch_config: ArchConfig,
    /// Checkpoints are tagged `<model_id>/fold<k>`.
    pub model_id: String,
    pub learning_rate: f64,
    #[serde(default = "default_betas")]
    pub adam_betas: (f64, f64),
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_halving")]
    pub lr_halving_patience: usize,
    #[serde(default = "default_stop")]
    pub early_stop_patience: usize,
    #[serde(default)]
    pub augmentation: AugmentationPolicy,
    /// Pixel-level loss parameters.
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_clip_len")]
    pub clip_length: usize,
    /// Every n-th frame of a negative validation video is a validation unit.
    #[serde(default = "default_val_stride")]
    pub val_negative_stride: usize,
    /// Fixed number of sampled windows per validation video (clip level).
    #[serde(default = "default_val_clips")]
    pub val_clips_per_video: usize,
    pub seed: u64,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_max_epochs() -> usize {
    100
}
fn default_halving() -> usize {
    5
}
fn default_stop() -> usize {
    10
}
fn default_clip_len() -> usize {
    CLIP_LENGTH
}
fn default_val_stride() -> usize {
    4
}
fn default_val_clips() -> usize {
    4
}

impl TrainConfig {
    /// Level defaults: learning rate 1e-3 (pixel), 1e-4 (clip), 1e-5 (frame);
    /// batch size 32, or 4 clips.
    pub fn new(level: Level, arch: &str, model_id: &str) -> Self {
        let (learning_rate, batch_size) = match level {
            Level::Pixel => (1e-3, 32),
            Level::Clip => (1e-4, 4),
            Level::Frame => (1e-5, 32),
        };
        Self {
            level,
            arch: arch.to_string(),
            arch_config: ArchConfig::default(),
            model_id: model_id.to_string(),
            learning_rate,
            adam_betas: default_betas(),
            batch_size,
            max_epochs: default_max_epochs(),
            lr_halving_patience: default_halving(),
            early_stop_patience: default_stop(),
            augmentation: AugmentationPolicy::default(),
            loss: LossConfig::default(),
            clip_length: default_clip_len(),
            val_negative_stride: default_val_stride(),
            val_clips_per_video: default_val_clips(),
            seed: 0,
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            lr_halving_patience: self.lr_halving_patience,
            early_stop_patience: self.early_stop_patience,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be a positive even number, got {}",
                self.batch_size
            )));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("adam_betas must lie in [0, 1), got {:?}", self.adam_betas)));
        }
        if self.clip_length == 0 || self.val_negative_stride == 0 || self.val_clips_per_video == 0 {
            return Err(Error::Config(
                "clip_length, val_negative_stride and val_clips_per_video must be positive".into(),
            ));
        }
        self.augmentation.validate().map_err(Error::Config)?;
        self.loss.validate()?;
        Ok(())
    }
}

/// The learning-rate and stopping rules, independent of any model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub lr_halving_patience: usize,
    pub early_stop_patience: usize,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.lr_halving_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be positive".into()));
        }
        if self.lr_halving_patience > self.early_stop_patience {
            return Err(Error::Config(format!(
                "lr_halving_patience ({}) exceeds early_stop_patience ({})",
                self.lr_halving_patience, self.early_stop_patience
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub learning_rate: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    /// Epochs after which the learning rate was halved.
    pub lr_halved_after: Vec<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn last_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch)
    }
}

/// One model's training state as seen by the schedule.
pub trait EpochRunner {
    type Snapshot;
    /// Trains one epoch at `lr`; returns the training loss.
    fn run_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64>;
    fn validation_loss(&mut self) -> Result<f64>;
    fn snapshot(&self) -> Self::Snapshot;
}

/// Runs epochs under the schedule. Returns the history and the snapshot
/// taken at the last improving epoch.
///
/// After each epoch: an improvement resets both patience counters; otherwise
/// training stops once `early_stop_patience` epochs passed without
/// improvement, and the rate halves after every `lr_halving_patience`
/// non-improving epochs (unless stopping).
pub fn run_schedule<R: EpochRunner>(
    runner: &mut R,
    sched: &ScheduleConfig,
) -> Result<(History, Option<R::Snapshot>)> {
    sched.validate()?;
    let mut history = History::default();
    let mut best = f64::INFINITY;
    let mut best_snapshot = None;
    let mut lr = sched.learning_rate;
    let mut since_improvement = 0usize;
    let mut since_halving = 0usize;

    for epoch in 1..=sched.max_epochs {
        let train_loss = runner.run_epoch(epoch, lr)?;
        let val_loss = if train_loss.is_finite() {
            runner.validation_loss()?
        } else {
            f64::NAN
        };
        let improved = val_loss < best - MIN_IMPROVEMENT;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr,
            improved,
        });
        for (what, v) in [("training", train_loss), ("validation", val_loss)] {
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    what,
                    history: Box::new(history),
                });
            }
        }
        if improved {
            best = val_loss;
            best_snapshot = Some(runner.snapshot());
            history.best_epoch = Some(epoch);
            history.best_val_loss = Some(val_loss);
            since_improvement = 0;
            since_halving = 0;
        } else {
            since_improvement += 1;
            since_halving += 1;
        }
        log::info!(
            "epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:.3e}{}",
            if improved { " *" } else { "" }
        );
        if since_improvement >= sched.early_stop_patience {
            history.stopped_early = true;
            break;
        }
        if since_halving >= sched.lr_halving_patience {
            lr /= 2.0;
            since_halving = 0;
            history.lr_halved_after.push(epoch);
        }
    }
    Ok((history, best_snapshot))
}

/// Units and their sampling weights for one partition.
#[derive(Clone, Debug, Default)]
pub struct UnitSet {
    pub positives: Vec<UnitId>,
    pub negatives: Vec<UnitId>,
    pub weights: HashMap<UnitId, f64>,
    /// Videos that contributed no units.
    pub excluded_videos: Vec<String>,
}

impl UnitSet {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which units a partition contributes.
#[derive(Clone, Copy, Debug)]
pub enum UnitSelection {
    /// Annotated frames (or windows containing one) of positive videos and
    /// every frame/window of negative videos.
    Training,
    /// As training, but negative videos contribute every `stride`-th frame,
    /// and clip-level videos a seeded sample of at most `clips` windows.
    Validation { stride: usize, clips: usize, seed: u64 },
}

/// Builds the units of `videos` for `level`.
pub fn build_units(
    dataset: &Dataset,
    videos: &[&LusVideo],
    level: Level,
    clip_len: usize,
    selection: UnitSelection,
) -> Result<UnitSet> {
    let mut units = Vec::new();
    let mut rng = match selection {
        UnitSelection::Validation { seed, .. } => ChaCha8Rng::seed_from_u64(seed),
        UnitSelection::Training => ChaCha8Rng::seed_from_u64(0),
    };
    for v in videos {
        let annotated = dataset.origins_by_frame(&v.video_id, None);
        let polarity = if v.label {
            Polarity::Positive
        } else {
            Polarity::Negative
        };
        let mut idx: Vec<usize> = match level {
            Level::Frame | Level::Pixel => {
                if v.label {
                    annotated.keys().copied().filter(|&t| t < v.n_frames()).collect()
                } else {
                    let stride = match selection {
                        UnitSelection::Validation { stride, .. } => stride,
                        UnitSelection::Training => 1,
                    };
                    (0..v.n_frames()).step_by(stride).collect()
                }
            }
            Level::Clip => {
                let n = v.n_frames().max(clip_len);
                let starts = clip_starts(n, clip_len, ClipMode::Training).unwrap_or_default();
                if v.label {
                    starts
                        .into_iter()
                        .filter(|&s| annotated.range(s..s + clip_len).next().is_some())
                        .collect()
                } else {
                    starts
                }
            }
        };
        if let (Level::Clip, UnitSelection::Validation { clips, .. }) = (level, selection) {
            if idx.len() > clips {
                let mut chosen: Vec<usize> = idx.choose_multiple(&mut rng, clips).copied().collect();
                chosen.sort_unstable();
                idx = chosen;
            }
        }
        units.extend(idx.into_iter().map(|i| Unit {
            id: UnitId::new(v.video_id.clone(), i),
            polarity,
        }));
    }
    let catalog: Vec<String> = videos.iter().map(|v| v.video_id.clone()).collect();
    let table = compute_sample_weights(&units, &catalog)?;
    if !table.excluded_videos.is_empty() {
        log::warn!(
            "{} videos contribute no units: {}",
            table.excluded_videos.len(),
            table.excluded_videos.join(", ")
        );
    }
    let mut set = UnitSet {
        excluded_videos: table.excluded_videos,
        ..UnitSet::default()
    };
    for w in table.weights {
        match w.polarity {
            Polarity::Positive => set.positives.push(w.unit.clone()),
            Polarity::Negative => set.negatives.push(w.unit.clone()),
        }
        set.weights.insert(w.unit, w.weight);
    }
    Ok(set)
}

/// Videos belonging to a set of patients, in dataset order.
pub fn videos_of<'a>(dataset: &'a Dataset, patients: &std::collections::BTreeSet<&str>) -> Vec<&'a LusVideo> {
    dataset
        .videos
        .iter()
        .filter(|v| patients.contains(v.patient_id.as_str()))
        .collect()
}

/// Loads the network input (and pixel label map) for a unit.
pub fn load_sample(
    dataset: &Dataset,
    origins: &HashMap<String, BTreeMap<usize, Vec<Point>>>,
    unit: &UnitId,
    level: Level,
    clip_len: usize,
) -> Result<Sample> {
    let video = dataset
        .video(&unit.video_id)
        .ok_or_else(|| bline_core::Error::UnknownVideo(unit.video_id.clone()))?;
    match level {
        Level::Clip => {
            let padded = pad_to_length(video, clip_len);
            let frames = (unit.index..unit.index + clip_len).map(|t| padded.frame(t)).collect();
            Ok(Sample { frames, label: None })
        }
        Level::Frame => Ok(Sample {
            frames: vec![video.frame(unit.index)],
            label: None,
        }),
        Level::Pixel => {
            let frame = video.frame(unit.index);
            let pts: &[Point] = origins
                .get(&unit.video_id)
                .and_then(|m| m.get(&unit.index))
                .map_or(&[], Vec::as_slice);
            let map = render_label_map(
                &video.video_id,
                unit.index,
                pts,
                video.px_spacing_mm,
                frame.rows(),
                frame.cols(),
            )?;
            Ok(Sample {
                frames: vec![frame],
                label: Some(map.grid),
            })
        }
    }
}

/// Weighted loss of one unit and, when `scale` is given, dL/dlogits scaled
/// by it.
fn unit_loss(
    logits: &Tensor,
    target: Target<'_>,
    weight: f64,
    cfg: &LossConfig,
    scale: Option<f64>,
) -> Result<(f64, Option<Tensor>)> {
    match target {
        Target::Binary(y) => {
            let z = logits.data[0];
            let p = sigmoid(z) as f64;
            let loss = bce_loss(y, p, weight)?;
            let grad = match scale {
                Some(s) => {
                    let g = bce_grad(y, p, weight)? * p * (1.0 - p) * s;
                    Some(Tensor::from_vec(logits.shape, vec![g as f32]))
                }
                None => None,
            };
            Ok((loss, grad))
        }
        Target::Map(map) => {
            let y: Vec<f64> = map.as_slice().iter().map(|&v| v as f64).collect();
            let p: Vec<f64> = logits.data.iter().map(|&z| sigmoid(z) as f64).collect();
            match scale {
                None => Ok((seg_loss(&y, &p, weight, cfg)?, None)),
                Some(s) => {
                    let (loss, gp) = seg_loss_grad(&y, &p, weight, cfg)?;
                    let gz = gp
                        .iter()
                        .zip(&p)
                        .map(|(g, p)| (g * p * (1.0 - p) * s) as f32)
                        .collect();
                    Ok((loss, Some(Tensor::from_vec(logits.shape, gz))))
                }
            }
        }
    }
}

enum Target<'a> {
    Binary(f64),
    Map(&'a Grid<u8>),
}

/// Network input tensor for a sample.
fn sample_input(predictor: &Predictor, sample: &Sample, level: Level) -> Result<Tensor> {
    match level {
        Level::Clip => predictor.clip_input(&sample.frames),
        _ => Ok(predictor.frame_input(&sample.frames[0])),
    }
}

/// Trains one model on a fold; implements [`EpochRunner`].
pub struct ModelRunner<'a> {
    pub predictor: Predictor,
    config: &'a TrainConfig,
    dataset: &'a Dataset,
    origins: HashMap<String, BTreeMap<usize, Vec<Point>>>,
    train: UnitSet,
    val: UnitSet,
    adam: Adam,
    aug_rng: ChaCha8Rng,
}

impl<'a> ModelRunner<'a> {
    pub fn new(
        predictor: Predictor,
        config: &'a TrainConfig,
        dataset: &'a Dataset,
        train: UnitSet,
        val: UnitSet,
    ) -> Result<Self> {
        for (name, set) in [("training", &train), ("validation", &val)] {
            if set.positives.is_empty() || set.negatives.is_empty() {
                return Err(Error::Config(format!(
                    "{name} partition needs positive and negative units, has {} and {}",
                    set.positives.len(),
                    set.negatives.len()
                )));
            }
        }
        let mut origins = HashMap::new();
        if config.level == Level::Pixel {
            for v in &dataset.videos {
                origins.insert(v.video_id.clone(), dataset.origins_by_frame(&v.video_id, None));
            }
        }
        Ok(Self {
            predictor,
            config,
            dataset,
            origins,
            train,
            val,
            adam: Adam::new(config.adam_betas),
            aug_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5A5_5A5A_0F0F_F0F0),
        })
    }

    fn target<'s>(&self, sample: &'s Sample, polarity: Polarity) -> Target<'s> {
        match (&sample.label, self.config.level) {
            (Some(map), Level::Pixel) => Target::Map(map),
            _ => Target::Binary(if polarity == Polarity::Positive { 1.0 } else { 0.0 }),
        }
    }

    /// One optimiser step on a batch; returns the batch loss.
    fn train_batch(&mut self, units: &[(UnitId, Polarity)], lr: f64) -> Result<f64> {
        let level = self.config.level;
        let weights: Vec<f64> = units
            .iter()
            .map(|(u, _)| self.train.weights.get(u).copied().unwrap_or(0.0))
            .collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config("batch with zero total weight".into()));
        }
        self.predictor.network_mut().zero_grad();
        let mut loss_sum = 0.0;
        for ((unit, polarity), &w) in units.iter().zip(&weights) {
            let raw = load_sample(self.dataset, &self.origins, unit, level, self.config.clip_length)?;
            let sample = augment(&raw, &self.config.augmentation, &mut self.aug_rng);
            let input = sample_input(&self.predictor, &sample, level)?;
            let target = self.target(&sample, *polarity);
            let cfg = self.config.loss.clone();
            let mut loss = 0.0;
            self.predictor.network_mut().forward_backward(&input, &mut |logits| {
                let (l, g) = unit_loss(logits, match &target {
                    Target::Binary(y) => Target::Binary(*y),
                    Target::Map(m) => Target::Map(m),
                }, w, &cfg, Some(1.0 / total))?;
                loss = l;
                Ok(g.expect("gradient requested"))
            })?;
            loss_sum += loss;
        }
        self.adam.step(lr, self.predictor.network_mut().params_and_grads());
        Ok(loss_sum / total)
    }
}

impl EpochRunner for ModelRunner<'_> {
    type Snapshot = Vec<f32>;

    fn run_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64> {
        let seed = self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let batches = make_epoch_schedule(
            &self.train.positives,
            &self.train.negatives,
            self.config.batch_size,
            seed,
        )?;
        let mut sum = 0.0;
        for batch in &batches {
            let units: Vec<(UnitId, Polarity)> = batch
                .positives
                .iter()
                .map(|u| (u.clone(), Polarity::Positive))
                .chain(batch.negatives.iter().map(|u| (u.clone(), Polarity::Negative)))
                .collect();
            let l = self.train_batch(&units, lr)?;
            if !l.is_finite() {
                return Ok(l);
            }
            sum += l;
        }
        Ok(sum / batches.len() as f64)
    }

    fn validation_loss(&mut self) -> Result<f64> {
        let level = self.config.level;
        let mut loss = 0.0;
        let mut total = 0.0;
        let units = self
            .val
            .positives
            .iter()
            .map(|u| (u, Polarity::Positive))
            .chain(self.val.negatives.iter().map(|u| (u, Polarity::Negative)));
        for (unit, polarity) in units {
            let w = self.val.weights[unit];
            let sample = load_sample(self.dataset, &self.origins, unit, level, self.config.clip_length)?;
            let input = sample_input(&self.predictor, &sample, level)?;
            let logits = self.predictor.network().forward(&input);
            let (l, _) = unit_loss(&logits, self.target(&sample, polarity), w, &self.config.loss, None)?;
            loss += l;
            total += w;
        }
        Ok(loss / total)
    }

    fn snapshot(&self) -> Vec<f32> {
        self.predictor.flat_params()
    }
}

/// Trains on all development folds except `fold` and validates on `fold`.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    split: &SplitManifest,
    fold: usize,
) -> Result<ModelCheckpoint> {
    train_with_registry(&Registry::builtin(), config, dataset, split, fold)
}

pub fn train_with_registry(
    registry: &Registry,
    config: &TrainConfig,
    dataset: &Dataset,
    split: &SplitManifest,
    fold: usize,
) -> Result<ModelCheckpoint> {
    config.validate()?;
    if fold >= split.folds.len() {
        return Err(Error::Config(format!(
            "fold index {fold} out of range for {} folds",
            split.folds.len()
        )));
    }
    let predictor = registry.build(config.level, &config.arch, &config.arch_config, config.seed)?;
    let train_videos = videos_of(dataset, &split.training_patients(fold));
    let val_videos = videos_of(dataset, &split.validation_patients(fold));
    let train_units = build_units(dataset, &train_videos, config.level, config.clip_length, UnitSelection::Training)?;
    let val_units = build_units(
        dataset,
        &val_videos,
        config.level,
        config.clip_length,
        UnitSelection::Validation {
            stride: config.val_negative_stride,
            clips: config.val_clips_per_video,
            seed: config.seed,
        },
    )?;
    log::info!(
        "{} fold {fold}: {} training units ({} positive), {} validation units",
        config.model_id,
        train_units.len(),
        train_units.positives.len(),
        val_units.len()
    );
    let mut runner = ModelRunner::new(predictor, config, dataset, train_units, val_units)?;
    let (history, best) = run_schedule(&mut runner, &config.schedule())?;
    let mut predictor = runner.predictor;
    if let Some(best) = best {
        predictor.set_flat_params(&best)?;
    }
    Ok(ModelCheckpoint {
        model_id: config.model_id.clone(),
        fold: Some(fold),
        predictor,
        history,
    })
}

/// Outcome of cross-validation; failed folds do not discard the others.
#[derive(Debug, Default)]
pub struct CvOutcome {
    pub checkpoints: Vec<ModelCheckpoint>,
    pub failures: Vec<FoldFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub fold: usize,
    pub error: String,
}

/// Runs `train_fold` for folds `0..n_folds`, collecting successes and
/// failures.
pub fn run_folds<F>(n_folds: usize, mut train_fold: F) -> CvOutcome
where
    F: FnMut(usize) -> Result<ModelCheckpoint>,
{
    let mut out = CvOutcome::default();
    for k in 0..n_folds {
        match train_fold(k) {
            Ok(c) => out.checkpoints.push(c),
            Err(e) => {
                log::error!("fold {k} failed: {e}");
                out.failures.push(FoldFailure {
                    fold: k,
                    error: e.to_string(),
                });
            }
        }
    }
    out
}

/// Trains one model per validation fold.
pub fn train_cv(config: &TrainConfig, dataset: &Dataset, split: &SplitManifest) -> CvOutcome {
    run_folds(split.folds.len().min(N_FOLDS), |k| train(config, dataset, split, k))
}

/// Directory name of a fold checkpoint below the model directory.
pub fn fold_dir_name(fold: usize) -> String {
    format!("fold{fold}")
}
