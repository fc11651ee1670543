use std::borrow::Cow;

use super::LusVideo;
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    /// Every sliding window is a training candidate.
    Training,
    /// Non-overlapping windows plus a tail window so every frame is covered.
    Inference,
}

/// `clip_len` consecutive frames of a video starting at `start`.
#[derive(Debug, Clone, Copy)]
pub struct Clip<'a> {
    pub start: usize,
    pub frames: &'a [Grid<u8>],
}

pub fn clip_starts(n_frames: usize, clip_len: usize, mode: ClipMode) -> Option<Vec<usize>> {
    if clip_len == 0 || n_frames < clip_len {
        return None;
    }
    let starts = match mode {
        ClipMode::Training => (0..=n_frames - clip_len).collect(),
        ClipMode::Inference => {
            let mut starts: Vec<usize> = (0..n_frames / clip_len).map(|i| i * clip_len).collect();
            if n_frames % clip_len != 0 {
                starts.push(n_frames - clip_len);
            }
            starts
        }
    };
    Some(starts)
}

pub fn extract_clips(video: &LusVideo, clip_len: usize, mode: ClipMode) -> Result<Vec<Clip<'_>>> {
    let starts = clip_starts(video.n_frames(), clip_len, mode).ok_or_else(|| Error::VideoTooShort {
        video_id: video.video_id.clone(),
        frames: video.n_frames(),
        clip_len,
    })?;
    Ok(starts
        .into_iter()
        .map(|start| Clip {
            start,
            frames: &video.frames[start..start + clip_len],
        })
        .collect())
}

/// Repeats the last frame until the video holds at least `len` frames.
pub fn pad_to_length(video: &LusVideo, len: usize) -> Cow<'_, LusVideo> {
    if video.n_frames() >= len || video.frames.is_empty() {
        return Cow::Borrowed(video);
    }
    let mut padded = video.clone();
    let last = padded.frames[padded.frames.len() - 1].clone();
    padded.frames.resize(len, last);
    Cow::Owned(padded)
}
