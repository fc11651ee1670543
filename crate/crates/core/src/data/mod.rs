//! Data model and the deterministic data-handling steps of the pipeline:
//! frame preprocessing, clip extraction, patient-level splitting, sample
//! weighting and balanced epoch scheduling.

mod clips;
pub mod io;
mod preprocess;
mod sampling;
mod split;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::{FRAME_HEIGHT, FRAME_WIDTH};

pub use clips::{clip_starts, extract_clips, pad_to_length, Clip, ClipMode};
pub use preprocess::{preprocess_frame, preprocess_frame_to, CropRect};
pub use sampling::{
    compute_sample_weights, make_epoch_schedule, Batch, Polarity, SampleWeight, Unit, UnitId,
    WeightTable,
};
pub use split::{build_patient_split, Partition, SplitManifest, N_FOLDS};

/// Smallest and largest pixel spacing (mm/px) accepted for a video.
pub const MIN_PX_SPACING_MM: f64 = 0.2;
pub const MAX_PX_SPACING_MM: f64 = 1.0;

/// A point in pixel coordinates; pixel `(r, c)` has its center at `(r, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub row: f64,
    pub col: f64,
}

impl Point {
    pub fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.row - other.row).hypot(self.col - other.col)
    }
}

/// A preprocessed grayscale video.
///
/// Frames are kept 8-bit quantized (`round(i * 255)`), which is exactly the
/// on-disk representation; [`LusVideo::frame`] returns intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LusVideo {
    pub video_id: String,
    pub patient_id: String,
    pub frames: Vec<Grid<u8>>,
    pub px_spacing_mm: f64,
    pub fps: f64,
    pub label: bool,
}

impl LusVideo {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, t: usize) -> Grid<f32> {
        dequantize(&self.frames[t])
    }

    pub fn meta(&self) -> VideoMeta {
        VideoMeta {
            video_id: self.video_id.clone(),
            patient_id: self.patient_id.clone(),
            n_frames: self.frames.len(),
            fps: self.fps,
            px_spacing_mm: self.px_spacing_mm,
            label: u8::from(self.label),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Err(Error::InvalidInput(format!("video {} has no frames", self.video_id)));
        };
        if self.frames.iter().any(|f| f.shape() != first.shape()) {
            return Err(Error::ShapeMismatch(format!(
                "frames of video {} differ in size",
                self.video_id
            )));
        }
        if !(MIN_PX_SPACING_MM..=MAX_PX_SPACING_MM).contains(&self.px_spacing_mm) {
            return Err(Error::InvalidInput(format!(
                "video {} has pixel spacing {} mm outside [{MIN_PX_SPACING_MM}, {MAX_PX_SPACING_MM}]",
                self.video_id, self.px_spacing_mm
            )));
        }
        if !(self.fps > 0.0) {
            return Err(Error::InvalidInput(format!(
                "video {} has non-positive frame rate",
                self.video_id
            )));
        }
        Ok(())
    }
}

pub fn quantize(frame: &Grid<f32>) -> Grid<u8> {
    frame.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn dequantize(frame: &Grid<u8>) -> Grid<f32> {
    frame.map(|v| f32::from(v) / 255.0)
}

/// One line of `videos.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    pub patient_id: String,
    pub n_frames: usize,
    pub fps: f64,
    pub px_spacing_mm: f64,
    pub label: u8,
}

/// B-line origins marked on one frame by one annotator. An empty `origins`
/// list means the frame was annotated and holds no B-lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub video_id: String,
    pub frame_index: usize,
    pub annotator_id: String,
    pub origins: Vec<Point>,
}

impl FrameAnnotation {
    pub fn validate(&self, n_frames: usize, rows: usize, cols: usize) -> Result<()> {
        if self.frame_index >= n_frames {
            return Err(Error::InvalidInput(format!(
                "annotation for frame {} of video {} which has {} frames",
                self.frame_index, self.video_id, n_frames
            )));
        }
        for p in &self.origins {
            if !point_in_bounds(p, rows, cols) {
                return Err(Error::InvalidAnnotation {
                    row: p.row,
                    col: p.col,
                    rows,
                    cols,
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn point_in_bounds(p: &Point, rows: usize, cols: usize) -> bool {
    p.row >= 0.0 && p.col >= 0.0 && p.row <= (rows - 1) as f64 && p.col <= (cols - 1) as f64
}

/// Videos plus their frame annotations.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub videos: Vec<LusVideo>,
    pub annotations: Vec<FrameAnnotation>,
}

impl Dataset {
    pub fn video(&self, video_id: &str) -> Option<&LusVideo> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    pub fn patient_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.videos.iter().map(|v| v.patient_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Annotator ids in sorted order; the first one is treated as the
    /// reference (training) annotator.
    pub fn annotators(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.annotations.iter().map(|a| a.annotator_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Annotated frames of one video for one annotator (or the reference
    /// annotator when `annotator` is `None`), keyed by frame index.
    pub fn origins_by_frame(
        &self,
        video_id: &str,
        annotator: Option<&str>,
    ) -> BTreeMap<usize, Vec<Point>> {
        let reference = match annotator {
            Some(a) => Some(a.to_string()),
            None => self.annotators().into_iter().next(),
        };
        let mut out = BTreeMap::new();
        let Some(reference) = reference else {
            return out;
        };
        for a in &self.annotations {
            if a.video_id == video_id && a.annotator_id == reference {
                out.entry(a.frame_index)
                    .or_insert_with(Vec::new)
                    .extend(a.origins.iter().copied());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut index = BTreeMap::new();
        for v in &self.videos {
            v.validate()?;
            if index.insert(v.video_id.as_str(), v).is_some() {
                return Err(Error::InvalidInput(format!("duplicate video id {}", v.video_id)));
            }
        }
        for a in &self.annotations {
            let v = index
                .get(a.video_id.as_str())
                .ok_or_else(|| Error::UnknownVideo(a.video_id.clone()))?;
            let (rows, cols) = v.frames[0].shape();
            a.validate(v.n_frames(), rows, cols)?;
        }
        Ok(())
    }
}

/// Default frame geometry as `(rows, cols)`.
pub fn frame_shape() -> (usize, usize) {
    (FRAME_HEIGHT, FRAME_WIDTH)
}
