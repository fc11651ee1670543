use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bline_core::data::io;
use bline_core::evaluation::{evaluate_detection, evaluate_localization, select_threshold, Confusion, Report};
use bline_core::phantom::{write_phantom_dataset, DatasetConfig};
use bline_core::aggregate::{
    ensemble_predict, fuse_decisions, Aggregation, FrameDetections, FusionMode, Level, PredictionRecord,
};
use bline_core::data::{build_patient_split, Dataset, LusVideo, SplitManifest};
use bline_models::inference::{predict_video, InferenceConfig};
use bline_models::trainer::{self, fold_dir_name, run_folds, FoldFailure, TrainConfig};
use bline_models::zoo::{read_checkpoint_config, CONFIG_FILE};
use bline_models::{load_checkpoint, save_checkpoint, Predictor};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::failure::{CmdResult, Context, Failure};
use crate::{EnsembleArgs, EvaluateArgs, FuseArgs, PredictArgs, ReportArgs, SplitArgs, SynthArgs, TrainArgs};

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const FUSED_CSV: &str = "fused.csv";
pub const FUSION_SUMMARY: &str = "summary.json";
pub const TRAIN_CONFIG: &str = "train.json";
pub const FAILURES_FILE: &str = "failures.json";

fn need_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::invalid(format!("{what} {} does not exist", path.display())))
    }
}

fn need_dir(path: &Path, what: &str) -> CmdResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::invalid(format!("{what} {} is not a directory", path.display())))
    }
}

fn sha256_file(path: &Path) -> CmdResult<String> {
    let bytes = std::fs::read(path).context(format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes the resolved configuration of a run next to its outputs.
fn freeze<T: Serialize>(dir: &Path, name: &str, config: &T) -> CmdResult {
    io::write_json(&dir.join(name), config).context(format!("writing {name}"))
}

fn load_dataset(dir: &Path) -> CmdResult<Dataset> {
    need_dir(dir, "dataset directory")?;
    need_file(&dir.join(io::VIDEOS_FILE), "video index")?;
    io::read_dataset(dir).context(format!("loading dataset {}", dir.display()))
}

fn load_split(data: &Path, explicit: Option<&PathBuf>, dataset: &Dataset) -> CmdResult<(PathBuf, SplitManifest)> {
    let path = explicit.cloned().unwrap_or_else(|| data.join(io::SPLIT_FILE));
    if !path.is_file() {
        return Err(Failure::invalid(format!(
            "split manifest {} does not exist (run `bline split --data {}` first)",
            path.display(),
            data.display()
        )));
    }
    let split = io::read_split(&path).context(format!("reading {}", path.display()))?;
    split
        .validate(Some(&dataset.patient_ids()))
        .context(format!("split {} does not match the dataset", path.display()))?;
    Ok((path, split))
}

fn read_predictions(path: &Path) -> CmdResult<Vec<PredictionRecord>> {
    need_file(path, "predictions file")?;
    let records: Vec<PredictionRecord> = io::read_jsonl(path).context(format!("reading {}", path.display()))?;
    if records.is_empty() {
        return Err(Failure::invalid(format!("{} holds no predictions", path.display())));
    }
    for r in &records {
        r.validate().context(path.display())?;
    }
    Ok(records)
}

fn single_level(records: &[PredictionRecord], path: &Path) -> CmdResult<(Level, String)> {
    let first = &records[0];
    if let Some(r) = records.iter().find(|r| r.level != first.level) {
        return Err(Failure::invalid(format!(
            "{} mixes {} and {} predictions",
            path.display(),
            first.level,
            r.level
        )));
    }
    Ok((first.level, first.model_id.clone()))
}

fn videos_by_patient<'a>(dataset: &'a Dataset, patients: &BTreeSet<&str>) -> Vec<&'a LusVideo> {
    dataset
        .videos
        .iter()
        .filter(|v| patients.contains(v.patient_id.as_str()))
        .collect()
}

fn write_predictions(out: &Path, records: &[PredictionRecord], detections: &[FrameDetections], level: Level) -> CmdResult {
    io::write_jsonl(&out.join(PREDICTIONS_FILE), records).context("writing predictions")?;
    if level == Level::Pixel {
        io::write_jsonl(&out.join(DETECTIONS_FILE), detections).context("writing detections")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SynthRun<'a> {
    command: &'static str,
    dataset: &'a DatasetConfig,
    n_videos: usize,
}

pub fn synth(a: &SynthArgs) -> CmdResult {
    let cfg = DatasetConfig {
        n_patients: a.patients,
        videos_per_patient: a.videos_per_patient,
        positive_fraction: a.positive_fraction,
        seed: a.seed,
        frames_per_video: a.frames_per_video,
    };
    cfg.validate()?;
    let dataset = write_phantom_dataset(&a.out, &cfg, a.overwrite).context(format!("writing {}", a.out.display()))?;
    freeze(
        &a.out,
        "synth.json",
        &SynthRun {
            command: "synth",
            dataset: &cfg,
            n_videos: dataset.videos.len(),
        },
    )?;
    println!("{} videos of {} patients written to {}", dataset.videos.len(), a.patients, a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SplitRun {
    command: &'static str,
    data: PathBuf,
    seed: u64,
    n_patients: usize,
}

pub fn split(a: &SplitArgs) -> CmdResult {
    need_dir(&a.data, "dataset directory")?;
    need_file(&a.data.join(io::VIDEOS_FILE), "video index")?;
    let metas = io::read_video_metas(&a.data).context("reading video index")?;
    let patients: Vec<String> = metas
        .iter()
        .map(|m| m.patient_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let out = a.out.clone().unwrap_or_else(|| a.data.join(io::SPLIT_FILE));
    if out.exists() && !a.overwrite {
        return Err(Failure::invalid(format!(
            "{} exists (pass --overwrite to replace it)",
            out.display()
        )));
    }
    let manifest = build_patient_split(&patients, a.seed)?;
    io::write_split(&out, &manifest).context(format!("writing {}", out.display()))?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    freeze(
        dir,
        "split_config.json",
        &SplitRun {
            command: "split",
            data: a.data.clone(),
            seed: a.seed,
            n_patients: patients.len(),
        },
    )?;
    println!(
        "{} test patients, {} folds of {:?} patients written to {}",
        manifest.test_patients.len(),
        manifest.folds.len(),
        manifest.folds.iter().map(Vec::len).collect::<Vec<_>>(),
        out.display()
    );
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> CmdResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            need_file(path, "training config")?;
            io::read_json::<TrainConfig>(path).context(format!("reading {}", path.display()))?
        }
        None => {
            let level: Level = a
                .level
                .as_deref()
                .ok_or_else(|| Failure::invalid("--level is required without --config"))?
                .parse()?;
            let arch = a
                .arch
                .as_deref()
                .ok_or_else(|| Failure::invalid("--arch is required without --config"))?;
            TrainConfig::new(level, arch, a.model_id.as_deref().unwrap_or(arch))
        }
    };
    if a.config.is_some() {
        if let Some(level) = &a.level {
            cfg.level = level.parse()?;
        }
        if let Some(arch) = &a.arch {
            cfg.arch = arch.clone();
        }
    }
    if let Some(v) = &a.model_id {
        cfg.model_id = v.clone();
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.lr_halving_patience {
        cfg.lr_halving_patience = v;
    }
    if let Some(v) = a.early_stop_patience {
        cfg.early_stop_patience = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainRun<'a> {
    command: &'static str,
    data: &'a Path,
    split: &'a Path,
    split_sha256: String,
    folds: Vec<usize>,
    train: &'a TrainConfig,
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let cfg = resolve_train_config(a)?;
    let dataset = load_dataset(&a.data)?;
    let (split_path, split) = load_split(&a.data, a.split.as_ref(), &dataset)?;
    let folds: Vec<usize> = if a.cv {
        (0..split.folds.len()).collect()
    } else {
        if a.fold >= split.folds.len() {
            return Err(Failure::invalid(format!(
                "--fold {} out of range (the split has {} folds)",
                a.fold,
                split.folds.len()
            )));
        }
        vec![a.fold]
    };
    // Registry lookups fail fast before any data work.
    bline_models::build_model(cfg.level, &cfg.arch, &cfg.arch_config, cfg.seed)?;
    io::prepare_output_dir(&a.out, a.overwrite).context(format!("preparing {}", a.out.display()))?;
    freeze(
        &a.out,
        TRAIN_CONFIG,
        &TrainRun {
            command: "train",
            data: &a.data,
            split: &split_path,
            split_sha256: sha256_file(&split_path)?,
            folds: folds.clone(),
            train: &cfg,
        },
    )?;

    let mut save_errors = Vec::new();
    let outcome = run_folds(folds.len(), |i| {
        let fold = folds[i];
        let ckpt = trainer::train(&cfg, &dataset, &split, fold)?;
        let dir = a.out.join(fold_dir_name(fold));
        if let Err(e) = save_checkpoint(&ckpt, &dir) {
            save_errors.push(FoldFailure {
                fold,
                error: format!("saving checkpoint: {e}"),
            });
        } else {
            let h = &ckpt.history;
            println!(
                "fold {fold}: {} epochs, best epoch {:?} (val loss {:?}) -> {}",
                h.epochs.len(),
                h.best_epoch,
                h.best_val_loss,
                dir.display()
            );
        }
        Ok(ckpt)
    });
    let mut failures = outcome.failures;
    for f in failures.iter_mut() {
        f.fold = folds[f.fold];
    }
    failures.extend(save_errors);
    if failures.is_empty() {
        return Ok(());
    }
    failures.sort_by_key(|f| f.fold);
    freeze(&a.out, FAILURES_FILE, &failures)?;
    let summary: Vec<String> = failures.iter().map(|f| format!("fold {}: {}", f.fold, f.error)).collect();
    Err(Failure::runtime(format!(
        "{} of {} folds failed ({}); completed folds were kept",
        failures.len(),
        folds.len(),
        summary.join("; ")
    )))
}

#[derive(Serialize)]
struct PredictRun<'a> {
    command: &'static str,
    data: &'a Path,
    split: &'a Path,
    split_sha256: String,
    models: Vec<ModelRef>,
    model_id: String,
    level: Level,
    inference: &'a InferenceConfig,
}

#[derive(Serialize)]
struct ModelRef {
    path: PathBuf,
    fold: Option<usize>,
    weights_sha256: String,
}

fn model_ref(dir: &Path) -> CmdResult<ModelRef> {
    let c = read_checkpoint_config(dir).context(format!("reading checkpoint {}", dir.display()))?;
    Ok(ModelRef {
        path: dir.to_path_buf(),
        fold: c.fold,
        weights_sha256: c.weights_sha256,
    })
}

fn inference_config(aggregation: &str) -> CmdResult<InferenceConfig> {
    let aggregation: Aggregation = aggregation.parse()?;
    Ok(InferenceConfig {
        aggregation,
        ..InferenceConfig::default()
    })
}

pub fn predict(a: &PredictArgs) -> CmdResult {
    let inference = inference_config(&a.aggregation)?;
    need_file(&a.model.join(CONFIG_FILE), "checkpoint config")?;
    let expected = a.level.as_deref().map(str::parse::<Level>).transpose()?;
    let ckpt = load_checkpoint(&a.model, expected).context(format!("loading {}", a.model.display()))?;
    let dataset = load_dataset(&a.data)?;
    let (split_path, split) = load_split(&a.data, a.split.as_ref(), &dataset)?;
    io::prepare_output_dir(&a.out, a.overwrite).context(format!("preparing {}", a.out.display()))?;

    let mut subsets: Vec<(&str, Vec<&LusVideo>)> = Vec::new();
    if let Some(fold) = ckpt.fold {
        if fold >= split.folds.len() {
            return Err(Failure::invalid(format!(
                "checkpoint fold {fold} does not exist in {}",
                split_path.display()
            )));
        }
        subsets.push(("validation", videos_by_patient(&dataset, &split.validation_patients(fold))));
    }
    subsets.push(("test", videos_by_patient(&dataset, &split.test_set())));

    let level = ckpt.level();
    let members = [&ckpt.predictor];
    let (records, detections) = predict_named(&members, &subsets, &ckpt.model_id, &inference)?;
    write_predictions(&a.out, &records, &detections, level)?;
    freeze(
        &a.out,
        "predict.json",
        &PredictRun {
            command: "predict",
            data: &a.data,
            split: &split_path,
            split_sha256: sha256_file(&split_path)?,
            models: vec![model_ref(&a.model)?],
            model_id: ckpt.model_id.clone(),
            level,
            inference: &inference,
        },
    )?;
    println!("{} predictions written to {}", records.len(), a.out.display());
    Ok(())
}

fn predict_named(
    members: &[&Predictor],
    subsets: &[(&str, Vec<&LusVideo>)],
    model_id: &str,
    cfg: &InferenceConfig,
) -> CmdResult<(Vec<PredictionRecord>, Vec<FrameDetections>)> {
    let mut records = Vec::new();
    let mut detections = Vec::new();
    for (name, videos) in subsets {
        for v in videos {
            let p = predict_video(members, v, model_id, Some(name), cfg)?;
            records.push(p.record);
            detections.extend(p.detections);
        }
    }
    Ok((records, detections))
}

pub fn ensemble(a: &EnsembleArgs) -> CmdResult {
    match &a.model_dir {
        Some(dir) => ensemble_models(a, dir),
        None if !a.predictions.is_empty() => ensemble_predictions(a),
        None => Err(Failure::invalid("give either --model-dir with --data, or --predictions files")),
    }
}

/// Test videos are scored by all fold instances; every validation video
/// only by the instance that held its fold out, so thresholds calibrate on
/// out-of-fold scores.
fn ensemble_models(a: &EnsembleArgs, model_dir: &Path) -> CmdResult {
    need_dir(model_dir, "model directory")?;
    let inference = inference_config(&a.aggregation)?;
    let data = a.data.as_ref().expect("clap enforces --data");
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(model_dir)
        .context(format!("listing {}", model_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CONFIG_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Failure::invalid(format!(
            "{} holds no checkpoints (expected fold<k>/{CONFIG_FILE})",
            model_dir.display()
        )));
    }
    let ckpts = dirs
        .iter()
        .map(|d| load_checkpoint(d, None).context(format!("loading {}", d.display())))
        .collect::<CmdResult<Vec<_>>>()?;
    let level = ckpts[0].level();
    if let Some(c) = ckpts.iter().find(|c| c.level() != level) {
        return Err(Failure::invalid(format!(
            "checkpoints mix {level} and {} models",
            c.level()
        )));
    }
    let mut seen = BTreeSet::new();
    for c in &ckpts {
        if let Some(f) = c.fold {
            if !seen.insert(f) {
                return Err(Failure::invalid(format!("fold {f} appears twice in {}", model_dir.display())));
            }
        }
    }
    let model_id = a.model_id.clone().unwrap_or_else(|| ckpts[0].model_id.clone());
    let dataset = load_dataset(data)?;
    let (split_path, split) = load_split(data, a.split.as_ref(), &dataset)?;
    io::prepare_output_dir(&a.out, a.overwrite).context(format!("preparing {}", a.out.display()))?;

    let mut records = Vec::new();
    let mut detections = Vec::new();
    for c in &ckpts {
        let Some(fold) = c.fold else { continue };
        if fold >= split.folds.len() {
            return Err(Failure::invalid(format!("checkpoint fold {fold} does not exist in the split")));
        }
        let videos = videos_by_patient(&dataset, &split.validation_patients(fold));
        let (r, d) = predict_named(&[&c.predictor], &[("validation", videos)], &model_id, &inference)?;
        records.extend(r);
        detections.extend(d);
    }
    let members: Vec<&Predictor> = ckpts.iter().map(|c| &c.predictor).collect();
    let test = videos_by_patient(&dataset, &split.test_set());
    let (r, d) = predict_named(&members, &[("test", test)], &model_id, &inference)?;
    records.extend(r);
    detections.extend(d);
    write_predictions(&a.out, &records, &detections, level)?;
    freeze(
        &a.out,
        "ensemble.json",
        &PredictRun {
            command: "ensemble",
            data,
            split: &split_path,
            split_sha256: sha256_file(&split_path)?,
            models: dirs.iter().map(|d| model_ref(d)).collect::<CmdResult<_>>()?,
            model_id,
            level,
            inference: &inference,
        },
    )?;
    println!(
        "{}-member {level} ensemble: {} predictions written to {}",
        ckpts.len(),
        records.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EnsembleFilesRun {
    command: &'static str,
    model_id: String,
    level: Level,
    members: Vec<FileRef>,
}

#[derive(Serialize)]
struct FileRef {
    path: PathBuf,
    sha256: String,
}

fn file_ref(path: &Path) -> CmdResult<FileRef> {
    Ok(FileRef {
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
    })
}

/// Averages per-instance prediction files video by video. A video present
/// in one file only (a validation video of one fold) passes through.
fn ensemble_predictions(a: &EnsembleArgs) -> CmdResult {
    let mut groups: BTreeMap<(String, String), Vec<PredictionRecord>> = BTreeMap::new();
    let mut order = Vec::new();
    let mut level = None;
    let mut ids = BTreeSet::new();
    for path in &a.predictions {
        let records = read_predictions(path)?;
        let (l, id) = single_level(&records, path)?;
        if l == Level::Pixel {
            return Err(Failure::invalid(
                "pixel-level ensembles average heatmaps; use --model-dir with --data instead",
            ));
        }
        if level.is_some_and(|prev| prev != l) {
            return Err(Failure::invalid(format!("{} holds {l} predictions, others do not", path.display())));
        }
        level = Some(l);
        ids.insert(id);
        let mut in_file = BTreeSet::new();
        for r in records {
            let key = (r.subset.clone().unwrap_or_default(), r.video_id.clone());
            if !in_file.insert(key.clone()) {
                return Err(Failure::invalid(format!(
                    "{} lists video {} twice",
                    path.display(),
                    r.video_id
                )));
            }
            let group = groups.entry(key.clone()).or_default();
            if group.is_empty() {
                order.push(key);
            }
            group.push(r);
        }
    }
    let level = level.expect("at least one file");
    let model_id = match &a.model_id {
        Some(id) => id.clone(),
        None if ids.len() == 1 => ids.into_iter().next().expect("one id"),
        None => return Err(Failure::invalid("members carry different model ids; pass --model-id")),
    };
    let records = order
        .iter()
        .map(|key| ensemble_predict(&groups[key], &model_id).context(format!("video {}", key.1)))
        .collect::<CmdResult<Vec<_>>>()?;
    io::prepare_output_dir(&a.out, a.overwrite).context(format!("preparing {}", a.out.display()))?;
    write_predictions(&a.out, &records, &[], level)?;
    freeze(
        &a.out,
        "ensemble.json",
        &EnsembleFilesRun {
            command: "ensemble",
            model_id,
            level,
            members: a.predictions.iter().map(|p| file_ref(p)).collect::<CmdResult<_>>()?,
        },
    )?;
    println!("{} ensembled predictions written to {}", records.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct FusionSummary {
    mode: FusionMode,
    thresholds: BTreeMap<Level, f64>,
    n_videos: usize,
    n_decided: usize,
    n_abstained: usize,
    abstention_fraction: f64,
    /// Detection F1 over the videos that received a decision.
    decided_f1: Option<f64>,
}

#[derive(Serialize)]
struct FuseRun {
    command: &'static str,
    mode: FusionMode,
    inputs: BTreeMap<Level, FileRef>,
}

pub fn fuse(a: &FuseArgs) -> CmdResult {
    let mode: FusionMode = a.mode.parse()?;
    let inputs = [(Level::Clip, &a.clip), (Level::Frame, &a.frame), (Level::Pixel, &a.pixel)];
    let mut thresholds = BTreeMap::new();
    let mut test: Vec<BTreeMap<String, &PredictionRecord>> = Vec::new();
    let loaded = inputs
        .iter()
        .map(|(_, p)| read_predictions(p))
        .collect::<CmdResult<Vec<_>>>()?;
    for ((level, path), records) in inputs.iter().zip(&loaded) {
        let (l, _) = single_level(records, path)?;
        if l != *level {
            return Err(Failure::invalid(format!(
                "--{level} expects {level}-level predictions but {} holds {l}",
                path.display()
            )));
        }
        let (labels, scores): (Vec<bool>, Vec<f64>) = records
            .iter()
            .filter(|r| r.subset.as_deref() == Some("validation"))
            .map(|r| (r.label.unwrap_or(0) != 0, r.video_score))
            .unzip();
        if labels.is_empty() {
            return Err(Failure::invalid(format!(
                "{} has no validation predictions to calibrate a threshold",
                path.display()
            )));
        }
        thresholds.insert(*level, select_threshold(&labels, &scores).context(path.display())?);
        test.push(
            records
                .iter()
                .filter(|r| r.subset.as_deref() == Some("test"))
                .map(|r| (r.video_id.clone(), r))
                .collect(),
        );
    }
    let ids: Vec<&String> = test[0]
        .keys()
        .filter(|id| test[1].contains_key(*id) && test[2].contains_key(*id))
        .collect();
    if ids.is_empty() {
        return Err(Failure::invalid("the three levels share no test videos"));
    }
    let skipped = test.iter().map(BTreeMap::len).max().unwrap_or(0) - ids.len();
    if skipped > 0 {
        log::warn!("{skipped} test videos lack a prediction at some level and were skipped");
    }

    let mut csv = String::from("video_id,label,clip,frame,pixel,fused,abstain\n");
    let (mut labels, mut decided) = (Vec::new(), Vec::new());
    let mut n_abstained = 0;
    for id in &ids {
        let mut d = [false; 3];
        for (k, level) in Level::ALL.iter().enumerate() {
            d[k] = test[k][*id].video_score >= thresholds[level];
        }
        let label = test[0][*id].label;
        let fused = fuse_decisions(d, mode);
        let label_s = label.map(|l| l.to_string()).unwrap_or_default();
        let fused_s = fused.map(|f| u8::from(f).to_string()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{id},{label_s},{},{},{},{fused_s},{}",
            u8::from(d[0]),
            u8::from(d[1]),
            u8::from(d[2]),
            u8::from(fused.is_none())
        );
        match (fused, label) {
            (None, _) => n_abstained += 1,
            (Some(f), Some(l)) => {
                labels.push(l != 0);
                decided.push(if f { 1.0 } else { 0.0 });
            }
            (Some(_), None) => {}
        }
    }
    let decided_f1 = (!labels.is_empty()).then(|| Confusion::at_threshold(&labels, &decided, 0.5).f1());
    let summary = FusionSummary {
        mode,
        thresholds,
        n_videos: ids.len(),
        n_decided: ids.len() - n_abstained,
        n_abstained,
        abstention_fraction: n_abstained as f64 / ids.len() as f64,
        decided_f1,
    };
    io::prepare_output_dir(&a.out, a.overwrite).context(format!("preparing {}", a.out.display()))?;
    std::fs::write(a.out.join(FUSED_CSV), csv).context("writing fused decisions")?;
    freeze(&a.out, FUSION_SUMMARY, &summary)?;
    freeze(
        &a.out,
        "fuse.json",
        &FuseRun {
            command: "fuse",
            mode,
            inputs: inputs
                .iter()
                .map(|(l, p)| Ok((*l, file_ref(p)?)))
                .collect::<CmdResult<_>>()?,
        },
    )?;
    println!(
        "{mode:?} fusion of {} test videos: {} decided, {} abstained ({:.1}%)",
        summary.n_videos,
        summary.n_decided,
        summary.n_abstained,
        100.0 * summary.abstention_fraction
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluateRun {
    command: &'static str,
    predictions: FileRef,
    detections: Option<FileRef>,
    data: Option<PathBuf>,
    threshold: Option<f64>,
}

pub fn evaluate(a: &EvaluateArgs) -> CmdResult {
    let records = read_predictions(&a.predictions)?;
    let (level, model_id) = single_level(&records, &a.predictions)?;
    if let Some(r) = records.iter().find(|r| r.model_id != model_id) {
        return Err(Failure::invalid(format!(
            "{} mixes models {model_id} and {}",
            a.predictions.display(),
            r.model_id
        )));
    }
    if let Some(t) = a.threshold {
        if !t.is_finite() {
            return Err(Failure::invalid("--threshold must be finite"));
        }
    }
    let detection = evaluate_detection(&records, a.threshold)?;
    let localization = match &a.detections {
        Some(path) => {
            if level != Level::Pixel {
                return Err(Failure::invalid(format!("detections only apply to pixel-level predictions, not {level}")));
            }
            need_file(path, "detections file")?;
            let dets: Vec<FrameDetections> = io::read_jsonl(path).context(format!("reading {}", path.display()))?;
            let dataset = load_dataset(a.data.as_ref().expect("clap enforces --data"))?;
            let test_ids: Vec<String> = detection.per_video.iter().map(|v| v.video_id.clone()).collect();
            let (_, metrics) = evaluate_localization(&dataset, &dets, &test_ids)?;
            Some(metrics)
        }
        None => None,
    };
    let report = Report {
        model_id,
        level,
        auc: detection.auc,
        f1: detection.f1,
        threshold: detection.threshold,
        localization,
        per_video: detection.per_video,
    };
    io::prepare_output_dir(&a.out, a.overwrite).context(format!("preparing {}", a.out.display()))?;
    io::write_json(&a.out.join(REPORT_JSON), &report).context("writing report")?;
    std::fs::write(
        a.out.join(REPORT_CSV),
        format!("{}\n{}\n", Report::CSV_HEADER, report.csv_row()),
    )
    .context("writing report")?;
    freeze(
        &a.out,
        "evaluate.json",
        &EvaluateRun {
            command: "evaluate",
            predictions: file_ref(&a.predictions)?,
            detections: a.detections.as_deref().map(file_ref).transpose()?,
            data: a.data.clone(),
            threshold: a.threshold,
        },
    )?;
    println!("{}", render_table(std::slice::from_ref(&report)));
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
}

/// Detection columns for every report, localization columns where present.
pub fn render_table(reports: &[Report]) -> String {
    let header = ["model", "level", "AUC", "F1", "threshold", "loc P", "loc R", "loc F1"];
    let rows: Vec<[String; 8]> = reports
        .iter()
        .map(|r| {
            let l = r.localization.as_ref();
            [
                r.model_id.clone(),
                r.level.to_string(),
                format!("{:.3}", r.auc),
                format!("{:.3}", r.f1),
                format!("{:.4}", r.threshold),
                fmt_opt(l.map(|l| l.precision)),
                fmt_opt(l.map(|l| l.recall)),
                fmt_opt(l.map(|l| l.f1)),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(&header.map(String::from));
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for row in &rows {
        out.push('\n');
        out.push_str(&line(row));
    }
    out
}

pub fn report(a: &ReportArgs) -> CmdResult {
    let mut reports = Vec::new();
    for p in &a.reports {
        let path = if p.is_dir() { p.join(REPORT_JSON) } else { p.clone() };
        need_file(&path, "report")?;
        reports.push(io::read_json::<Report>(&path).context(format!("reading {}", path.display()))?);
    }
    reports.sort_by(|x, y| (x.level, &x.model_id).cmp(&(y.level, &y.model_id)));
    println!("{}", render_table(&reports));
    Ok(())
}
