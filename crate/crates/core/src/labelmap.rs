//! Rendering of single-point origin annotations into binary training targets.

use serde::{Deserialize, Serialize};

use crate::data::{point_in_bounds, Point};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Diameter of the disc drawn around every annotated origin.
pub const DISC_DIAMETER_MM: f64 = 4.0;

pub fn mm_to_px(length_mm: f64, px_spacing_mm: f64) -> Result<f64> {
    if !(px_spacing_mm > 0.0) {
        return Err(Error::InvalidSpacing(px_spacing_mm));
    }
    Ok(length_mm / px_spacing_mm)
}

/// Binary per-pixel target for one frame (1 = within a disc).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub grid: Grid<u8>,
    pub video_id: String,
    pub frame_index: usize,
}

impl LabelMap {
    pub fn foreground_count(&self) -> usize {
        self.grid.as_slice().iter().filter(|&&v| v != 0).count()
    }

    /// Label map as 0/255 grayscale, for debug export as PNG.
    pub fn to_png_grid(&self) -> Grid<u8> {
        self.grid.map(|v| if v != 0 { 255 } else { 0 })
    }
}

/// Marks pixel `(r, c)` when its center lies within `DISC_DIAMETER_MM / 2`
/// (inclusive) of any origin. Overlapping discs are unioned.
pub fn render_disc_mask(
    origins: &[Point],
    px_spacing_mm: f64,
    rows: usize,
    cols: usize,
) -> Result<Grid<u8>> {
    let radius = mm_to_px(DISC_DIAMETER_MM / 2.0, px_spacing_mm)?;
    for p in origins {
        if !point_in_bounds(p, rows, cols) {
            return Err(Error::InvalidAnnotation {
                row: p.row,
                col: p.col,
                rows,
                cols,
            });
        }
    }
    let mut grid = Grid::new(rows, cols);
    let r2 = radius * radius;
    for p in origins {
        let r_lo = (p.row - radius).ceil().max(0.0) as usize;
        let r_hi = ((p.row + radius).floor() as usize).min(rows - 1);
        let c_lo = (p.col - radius).ceil().max(0.0) as usize;
        let c_hi = ((p.col + radius).floor() as usize).min(cols - 1);
        for r in r_lo..=r_hi {
            let dr = r as f64 - p.row;
            for c in c_lo..=c_hi {
                let dc = c as f64 - p.col;
                if dr * dr + dc * dc <= r2 {
                    grid.set(r, c, 1);
                }
            }
        }
    }
    Ok(grid)
}

pub fn render_label_map(
    video_id: &str,
    frame_index: usize,
    origins: &[Point],
    px_spacing_mm: f64,
    rows: usize,
    cols: usize,
) -> Result<LabelMap> {
    Ok(LabelMap {
        grid: render_disc_mask(origins, px_spacing_mm, rows, cols)?,
        video_id: video_id.to_string(),
        frame_index,
    })
}
