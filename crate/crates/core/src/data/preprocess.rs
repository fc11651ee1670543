use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::{FRAME_HEIGHT, FRAME_WIDTH};

/// Axis-aligned crop rectangle in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropRect {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height: rows,
            width: cols,
        }
    }
}

/// Crops the ultrasound window, zero-pads it back to the raw frame's aspect
/// ratio, resamples bilinearly to 384x256 and min-max normalizes to [0, 1].
pub fn preprocess_frame(raw: &Grid<f32>, crop: CropRect) -> Result<Grid<f32>> {
    preprocess_frame_to(raw, crop, FRAME_HEIGHT, FRAME_WIDTH)
}

pub fn preprocess_frame_to(
    raw: &Grid<f32>,
    crop: CropRect,
    out_rows: usize,
    out_cols: usize,
) -> Result<Grid<f32>> {
    let (rows, cols) = raw.shape();
    if raw.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    if out_rows == 0 || out_cols == 0 {
        return Err(Error::InvalidInput("empty output size".into()));
    }
    if crop.height == 0
        || crop.width == 0
        || crop.top + crop.height > rows
        || crop.left + crop.width > cols
    {
        return Err(Error::InvalidCrop {
            crop: (crop.top, crop.left, crop.height, crop.width),
            rows,
            cols,
        });
    }

    let padded = pad_to_aspect(raw, crop, rows, cols);
    let mut out = resize_bilinear(&padded, out_rows, out_cols);
    normalize_min_max(&mut out);
    Ok(out)
}

/// Cuts `crop` out of `raw` and zero-pads the short axis (split evenly,
/// extra pixel after) until the aspect ratio matches `aspect_rows:aspect_cols`.
fn pad_to_aspect(raw: &Grid<f32>, crop: CropRect, aspect_rows: usize, aspect_cols: usize) -> Grid<f32> {
    let (h, w) = (crop.height, crop.width);
    // Compare w/h against aspect_cols/aspect_rows without floating point.
    let lhs = w * aspect_rows;
    let rhs = h * aspect_cols;
    let (new_h, new_w) = if lhs < rhs {
        let new_w = (2 * h * aspect_cols + aspect_rows) / (2 * aspect_rows);
        (h, new_w.max(w))
    } else if lhs > rhs {
        let new_h = (2 * w * aspect_rows + aspect_cols) / (2 * aspect_cols);
        (new_h.max(h), w)
    } else {
        (h, w)
    };
    let off_r = (new_h - h) / 2;
    let off_c = (new_w - w) / 2;
    let mut out = Grid::new(new_h, new_w);
    for r in 0..h {
        for c in 0..w {
            out.set(r + off_r, c + off_c, raw.get(crop.top + r, crop.left + c));
        }
    }
    out
}

/// Bilinear resampling with half-pixel centers (`align_corners = false`).
pub fn resize_bilinear(src: &Grid<f32>, out_rows: usize, out_cols: usize) -> Grid<f32> {
    let sr = src.rows() as f64 / out_rows as f64;
    let sc = src.cols() as f64 / out_cols as f64;
    Grid::from_fn(out_rows, out_cols, |r, c| {
        let y = (r as f64 + 0.5) * sr - 0.5;
        let x = (c as f64 + 0.5) * sc - 0.5;
        src.sample_bilinear_clamped(y, x)
    })
}

fn normalize_min_max(frame: &mut Grid<f32>) {
    let (lo, hi) = frame.min_max();
    let range = hi - lo;
    for v in frame.as_mut_slice() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}
