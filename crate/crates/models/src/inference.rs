//! Video-level inference for single models and five-instance ensembles.

use crate::zoo::Predictor;
use crate::{Error, Result};
use bline_core::aggregate::{
    aggregate_video, average_heatmaps, ensemble_predict, pixel_video_score, postprocess_heatmap,
    Aggregation, FrameDetections, Level, PredictionRecord, HEATMAP_THRESHOLD,
};
use bline_core::data::{clip_starts, pad_to_length, ClipMode, LusVideo};
use bline_core::{Grid, CLIP_LENGTH};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Reduction of clip or frame scores; ignored at the pixel level.
    pub aggregation: Aggregation,
    pub clip_length: usize,
    pub heatmap_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Max,
            clip_length: CLIP_LENGTH,
            heatmap_threshold: HEATMAP_THRESHOLD,
        }
    }
}

/// A video's prediction record plus, for pixel models, its detections.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPrediction {
    pub record: PredictionRecord,
    pub detections: Vec<FrameDetections>,
}

fn check_members(members: &[&Predictor]) -> Result<Level> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("no models to predict with".into()))?;
    if let Some(m) = members.iter().find(|m| m.level != first.level) {
        return Err(Error::LevelMismatch(format!(
            "ensemble mixes {} and {} models",
            first.level, m.level
        )));
    }
    Ok(first.level)
}

/// Unit scores of one clip or frame model over a whole video.
pub fn unit_scores(predictor: &Predictor, video: &LusVideo, cfg: &InferenceConfig) -> Result<Vec<f64>> {
    match predictor.level {
        Level::Frame => (0..video.n_frames())
            .map(|t| predictor.predict_frame(&video.frame(t)).map(f64::from))
            .collect(),
        Level::Clip => {
            let l = cfg.clip_length;
            let padded = pad_to_length(video, l);
            let starts = clip_starts(padded.n_frames(), l, ClipMode::Inference)
                .ok_or_else(|| Error::Config(format!("clip length {l} is invalid")))?;
            starts
                .into_iter()
                .map(|s| {
                    let frames: Vec<Grid<f32>> = (s..s + l).map(|t| padded.frame(t)).collect();
                    predictor.predict_clip(&frames).map(f64::from)
                })
                .collect()
        }
        Level::Pixel => Err(Error::LevelMismatch(
            "pixel models produce heatmaps, not unit scores".into(),
        )),
    }
}

/// Predicts one video with one model or an ensemble. Clip and frame
/// ensembles average unit scores; pixel ensembles average heatmaps before
/// post-processing.
pub fn predict_video(
    members: &[&Predictor],
    video: &LusVideo,
    model_id: &str,
    subset: Option<&str>,
    cfg: &InferenceConfig,
) -> Result<VideoPrediction> {
    let level = check_members(members)?;
    let label = Some(u8::from(video.label));
    let subset = subset.map(str::to_string);
    match level {
        Level::Clip | Level::Frame => {
            let records = members
                .iter()
                .map(|m| {
                    let scores = unit_scores(m, video, cfg)?;
                    let video_score = aggregate_video(&scores, cfg.aggregation)?;
                    Ok(PredictionRecord {
                        video_id: video.video_id.clone(),
                        level,
                        model_id: model_id.to_string(),
                        subset: subset.clone(),
                        label,
                        aggregation: cfg.aggregation,
                        unit_scores: scores,
                        video_score,
                        threshold_used: None,
                        decision: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let record = if records.len() == 1 {
                records.into_iter().next().expect("one record")
            } else {
                ensemble_predict(&records, model_id)?
            };
            Ok(VideoPrediction {
                record,
                detections: Vec::new(),
            })
        }
        Level::Pixel => {
            let mut detections = Vec::with_capacity(video.n_frames());
            let mut counts = Vec::with_capacity(video.n_frames());
            for t in 0..video.n_frames() {
                let frame = video.frame(t);
                let maps = members
                    .iter()
                    .map(|m| m.predict_heatmap(&frame))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Grid<f32>> = maps.iter().collect();
                let heatmap = average_heatmaps(&refs)?;
                let dets = postprocess_heatmap(&heatmap, cfg.heatmap_threshold, t);
                counts.push(dets.len());
                detections.push(FrameDetections {
                    video_id: video.video_id.clone(),
                    model_id: model_id.to_string(),
                    frame_index: t,
                    detections: dets,
                });
            }
            let record = PredictionRecord {
                video_id: video.video_id.clone(),
                level,
                model_id: model_id.to_string(),
                subset,
                label,
                aggregation: Aggregation::Mean,
                unit_scores: counts.iter().map(|&c| c as f64).collect(),
                video_score: pixel_video_score(&counts)?,
                threshold_used: None,
                decision: None,
            };
            Ok(VideoPrediction { record, detections })
        }
    }
}

/// Predicts every video of every named subset.
pub fn predict_subsets(
    members: &[&Predictor],
    subsets: &[(&str, Vec<&LusVideo>)],
    model_id: &str,
    cfg: &InferenceConfig,
) -> Result<(Vec<PredictionRecord>, Vec<FrameDetections>)> {
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
