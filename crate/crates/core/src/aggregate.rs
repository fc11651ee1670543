//! From per-unit model outputs to video-level scores and decisions:
//! heatmap post-processing, aggregation rules, ensembling and cross-level
//! fusion.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Heatmap binarization threshold.
pub const HEATMAP_THRESHOLD: f64 = 0.5;
/// Default window of the moving-average aggregation.
pub const DEFAULT_MOVING_AVERAGE_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Clip,
    Frame,
    Pixel,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Clip, Level::Frame, Level::Pixel];

    pub fn as_str(&self) -> &'static str {
        match self {
            Level::Clip => "clip",
            Level::Frame => "frame",
            Level::Pixel => "pixel",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(Level::Clip),
            "frame" => Ok(Level::Frame),
            "pixel" => Ok(Level::Pixel),
            other => Err(Error::Config(format!(
                "unknown level {other:?} (expected clip, frame or pixel)"
            ))),
        }
    }
}

/// A predicted B-line origin: centroid of one connected component of the
/// binarized heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OriginDetection {
    pub frame_index: usize,
    pub row: f64,
    pub col: f64,
    pub component_size_px: usize,
}

/// A foreground component: pixel count, centroid and the first pixel met in
/// raster order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub size: usize,
    pub centroid: (f64, f64),
    pub seed: (usize, usize),
}

/// 8-connected components of the non-zero pixels, ordered by their first
/// pixel in raster order.
pub fn connected_components(mask: &Grid<u8>) -> Vec<Component> {
    let (rows, cols) = mask.shape();
    let mut visited = vec![false; rows * cols];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for r0 in 0..rows {
        for c0 in 0..cols {
            let idx = r0 * cols + c0;
            if visited[idx] || mask.get(r0, c0) == 0 {
                continue;
            }
            visited[idx] = true;
            queue.push_back((r0, c0));
            let (mut n, mut sr, mut sc) = (0usize, 0f64, 0f64);
            while let Some((r, c)) = queue.pop_front() {
                n += 1;
                sr += r as f64;
                sc += c as f64;
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        let j = nr * cols + nc;
                        if !visited[j] && mask.get(nr, nc) != 0 {
                            visited[j] = true;
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            out.push(Component {
                size: n,
                centroid: (sr / n as f64, sc / n as f64),
                seed: (r0, c0),
            });
        }
    }
    out
}

pub fn binarize(heatmap: &Grid<f32>, threshold: f64) -> Grid<u8> {
    heatmap.map(|v| u8::from(f64::from(v) >= threshold))
}

/// Binarizes with `value >= threshold` and returns one detection per
/// 8-connected component, located at the component's centroid.
pub fn postprocess_heatmap(
    heatmap: &Grid<f32>,
    threshold: f64,
    frame_index: usize,
) -> Vec<OriginDetection> {
    connected_components(&binarize(heatmap, threshold))
        .into_iter()
        .map(|c| OriginDetection {
            frame_index,
            row: c.centroid.0,
            col: c.centroid.1,
            component_size_px: c.size,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Max,
    /// Maximum of a centered moving average with the given window.
    MaxMovingAverage(usize),
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Mean => f.write_str("mean"),
            Aggregation::Max => f.write_str("max"),
            Aggregation::MaxMovingAverage(w) => write!(f, "max_moving_avg:{w}"),
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            "max_moving_avg" => Ok(Aggregation::MaxMovingAverage(DEFAULT_MOVING_AVERAGE_WINDOW)),
            _ => {
                let w = s
                    .strip_prefix("max_moving_avg:")
                    .and_then(|w| w.parse::<usize>().ok())
                    .filter(|&w| w > 0)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "unknown aggregation {s:?} (expected mean, max or max_moving_avg:<w>)"
                        ))
                    })?;
                Ok(Aggregation::MaxMovingAverage(w))
            }
        }
    }
}

impl Serialize for Aggregation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Aggregation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn aggregate_video(unit_scores: &[f64], method: Aggregation) -> Result<f64> {
    if unit_scores.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    let n = unit_scores.len();
    Ok(match method {
        Aggregation::Mean => unit_scores.iter().sum::<f64>() / n as f64,
        Aggregation::Max => unit_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::MaxMovingAverage(w) => {
            let w = w.max(1);
            let left = w / 2;
            let right = w - 1 - left;
            (0..n)
                .map(|i| {
                    let lo = i.saturating_sub(left);
                    let hi = (i + right).min(n - 1);
                    let win = &unit_scores[lo..=hi];
                    win.iter().sum::<f64>() / win.len() as f64
                })
                .fold(f64::NEG_INFINITY, f64::max)
        }
    })
}

/// Average number of detections per frame.
pub fn pixel_video_score(per_frame_counts: &[usize]) -> Result<f64> {
    if per_frame_counts.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    Ok(per_frame_counts.iter().sum::<usize>() as f64 / per_frame_counts.len() as f64)
}

/// One line of `predictions.jsonl`.
///
/// For clip and frame models `unit_scores` are probabilities per clip or
/// frame; for pixel models they are per-frame detection counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub level: Level,
    pub model_id: String,
    /// `validation` or `test`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
    /// Ground-truth video label, carried along so evaluation needs no other
    /// input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    pub aggregation: Aggregation,
    pub unit_scores: Vec<f64>,
    pub video_score: f64,
    #[serde(default)]
    pub threshold_used: Option<f64>,
    #[serde(default)]
    pub decision: Option<u8>,
}

impl PredictionRecord {
    /// Recomputes the video score from the unit scores.
    pub fn recompute_score(&self) -> Result<f64> {
        match self.level {
            Level::Pixel => Ok(self.unit_scores.iter().sum::<f64>() / self.unit_scores.len().max(1) as f64),
            _ => aggregate_video(&self.unit_scores, self.aggregation),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::Format {
            file: "predictions.jsonl".into(),
            reason: format!("video {}: {reason}", self.video_id),
        };
        if self.unit_scores.is_empty() {
            return Err(bad("no unit scores".into()));
        }
        match self.level {
            Level::Pixel => {
                if self.unit_scores.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
                    return Err(bad("pixel-level counts must be non-negative integers".into()));
                }
            }
            _ => {
                if self.unit_scores.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(bad("unit scores must lie in [0, 1]".into()));
                }
            }
        }
        let expected = self.recompute_score()?;
        if (expected - self.video_score).abs() > 1e-12 {
            return Err(bad(format!(
                "video_score {} disagrees with its aggregation ({expected})",
                self.video_score
            )));
        }
        Ok(())
    }
}

/// One line of `detections.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub video_id: String,
    pub model_id: String,
    pub frame_index: usize,
    pub detections: Vec<OriginDetection>,
}

/// Unit-wise mean of several instances' unit scores, then the usual
/// aggregation. Only meaningful for clip and frame levels; pixel ensembles
/// average heatmaps (see [`average_heatmaps`]) before counting.
pub fn ensemble_predict(records: &[PredictionRecord], model_id: &str) -> Result<PredictionRecord> {
    let first = records
        .first()
        .ok_or_else(|| Error::Alignment("no ensemble members".into()))?;
    if first.level == Level::Pixel {
        return Err(Error::Alignment(
            "pixel-level ensembles average heatmaps, not detection counts".into(),
        ));
    }
    for r in records {
        if r.video_id != first.video_id || r.level != first.level {
            return Err(Error::Alignment(format!(
                "member for video {} ({}) mixed with video {} ({})",
                r.video_id, r.level, first.video_id, first.level
            )));
        }
        if r.unit_scores.len() != first.unit_scores.len() {
            return Err(Error::Alignment(format!(
                "video {}: members have {} and {} units",
                r.video_id,
                first.unit_scores.len(),
                r.unit_scores.len()
            )));
        }
    }
    let unit_scores = mean_columns(records.iter().map(|r| r.unit_scores.as_slice()), first.unit_scores.len(), records.len());
    let video_score = aggregate_video(&unit_scores, first.aggregation)?;
    Ok(PredictionRecord {
        video_id: first.video_id.clone(),
        level: first.level,
        model_id: model_id.to_string(),
        subset: first.subset.clone(),
        label: first.label,
        aggregation: first.aggregation,
        unit_scores,
        video_score,
        threshold_used: None,
        decision: None,
    })
}

fn mean_columns<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize, n: usize) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / n as f64).collect()
}

/// Pixel-wise mean of equally sized heatmaps, accumulated in double
/// precision.
pub fn average_heatmaps(maps: &[&Grid<f32>]) -> Result<Grid<f32>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Alignment("no heatmaps to average".into()))?;
    if maps.iter().any(|m| m.shape() != first.shape()) {
        return Err(Error::Alignment("heatmaps differ in size".into()));
    }
    let mut acc = vec![0f64; first.len()];
    for m in maps {
        for (a, &v) in acc.iter_mut().zip(m.as_slice()) {
            *a += f64::from(v);
        }
    }
    let n = maps.len() as f64;
    Ok(Grid::from_vec(
        first.rows(),
        first.cols(),
        acc.into_iter().map(|a| (a / n) as f32).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Majority,
    Unanimous,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(FusionMode::Majority),
            "unanimous" => Ok(FusionMode::Unanimous),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (expected majority or unanimous)"
            ))),
        }
    }
}

/// Combines clip-, frame- and pixel-level decisions. `None` means the
/// unanimous rule abstains.
pub fn fuse_decisions(decisions: [bool; 3], mode: FusionMode) -> Option<bool> {
    let positives = decisions.iter().filter(|&&d| d).count();
    match mode {
        FusionMode::Majority => Some(positives >= 2),
        FusionMode::Unanimous => match positives {
            0 => Some(false),
            3 => Some(true),
            _ => None,
        },
    }
}
