//! On-disk dataset layout:
//!
//! ```text
//! <root>/videos.jsonl
//! <root>/annotations.csv
//! <root>/frames/<video_id>/<t:05>.png   8-bit grayscale
//! <root>/split.json                     optional
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Dataset, FrameAnnotation, LusVideo, Point, SplitManifest, VideoMeta};
use crate::error::{Error, Result};
use crate::grid::Grid;

pub const VIDEOS_FILE: &str = "videos.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const FRAMES_DIR: &str = "frames";

pub fn frame_path(root: &Path, video_id: &str, t: usize) -> PathBuf {
    root.join(FRAMES_DIR).join(video_id).join(format!("{t:05}.png"))
}

pub fn write_png(path: &Path, frame: &Grid<u8>) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, frame.cols() as u32, frame.rows() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(frame.as_slice())?;
    writer.finish()?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Grid<u8>> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format {
            file: path.display().to_string(),
            reason: "expected 8-bit grayscale".into(),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(w * h)];
    let frame = reader.next_frame(&mut buf)?;
    buf.truncate(frame.buffer_size());
    Ok(Grid::from_vec(h, w, buf))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            file: path.display().to_string(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        file: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    video_id: String,
    frame_index: usize,
    annotator_id: String,
    row_px: Option<f64>,
    col_px: Option<f64>,
}

pub fn write_annotations(path: &Path, annotations: &[FrameAnnotation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    // Header is written explicitly so an empty file still carries it.
    w.write_record(["video_id", "frame_index", "annotator_id", "row_px", "col_px"])?;
    for a in annotations {
        let frame = a.frame_index.to_string();
        if a.origins.is_empty() {
            w.write_record([a.video_id.as_str(), &frame, &a.annotator_id, "", ""])?;
        }
        for p in &a.origins {
            w.write_record([
                a.video_id.as_str(),
                &frame,
                &a.annotator_id,
                &p.row.to_string(),
                &p.col.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `annotations.csv`, grouping rows by (video, frame, annotator) in
/// first-seen order.
pub fn read_annotations(path: &Path) -> Result<Vec<FrameAnnotation>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut order: Vec<(String, usize, String)> = Vec::new();
    let mut groups: BTreeMap<(String, usize, String), Vec<Point>> = BTreeMap::new();
    for row in r.deserialize() {
        let row: AnnotationRow = row?;
        let key = (row.video_id, row.frame_index, row.annotator_id);
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        match (row.row_px, row.col_px) {
            (Some(row), Some(col)) => entry.push(Point { row, col }),
            (None, None) => {}
            _ => {
                return Err(Error::Format {
                    file: path.display().to_string(),
                    reason: "row_px and col_px must both be set or both be empty".into(),
                })
            }
        }
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let origins = groups.remove(&key).unwrap_or_default();
            FrameAnnotation {
                video_id: key.0,
                frame_index: key.1,
                annotator_id: key.2,
                origins,
            }
        })
        .collect())
}

pub fn write_split(path: &Path, split: &SplitManifest) -> Result<()> {
    write_json(path, split)
}

pub fn read_split(path: &Path) -> Result<SplitManifest> {
    let split: SplitManifest = read_json(path)?;
    split.validate(None)?;
    Ok(split)
}

/// Prepares `dir` as an output directory, refusing to touch a non-empty
/// directory unless `overwrite` is set.
pub fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::OutputExists(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes videos, frames and annotations into an existing directory.
pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    let metas: Vec<VideoMeta> = dataset.videos.iter().map(LusVideo::meta).collect();
    write_jsonl(&root.join(VIDEOS_FILE), &metas)?;
    write_annotations(&root.join(ANNOTATIONS_FILE), &dataset.annotations)?;
    for v in &dataset.videos {
        fs::create_dir_all(root.join(FRAMES_DIR).join(&v.video_id))?;
        for (t, frame) in v.frames.iter().enumerate() {
            write_png(&frame_path(root, &v.video_id, t), frame)?;
        }
    }
    Ok(())
}

pub fn read_video_metas(root: &Path) -> Result<Vec<VideoMeta>> {
    read_jsonl(&root.join(VIDEOS_FILE))
}

pub fn read_video(root: &Path, meta: &VideoMeta) -> Result<LusVideo> {
    let frames = (0..meta.n_frames)
        .map(|t| read_png(&frame_path(root, &meta.video_id, t)))
        .collect::<Result<Vec<_>>>()?;
    let video = LusVideo {
        video_id: meta.video_id.clone(),
        patient_id: meta.patient_id.clone(),
        frames,
        px_spacing_mm: meta.px_spacing_mm,
        fps: meta.fps,
        label: meta.label != 0,
    };
    video.validate()?;
    Ok(video)
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let metas = read_video_metas(root)?;
    let videos = metas
        .iter()
        .map(|m| read_video(root, m))
        .collect::<Result<Vec<_>>>()?;
    let annotations = read_annotations(&root.join(ANNOTATIONS_FILE))?;
    let ds = Dataset {
        videos,
        annotations,
    };
    ds.validate()?;
    Ok(ds)
}
