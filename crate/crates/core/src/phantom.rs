//! Synthetic curvilinear lung-ultrasound videos with exact B-line origin
//! ground truth.
//!
//! Geometry: the probe apex sits above the image so that the probe surface
//! (radius [`PROBE_RADIUS_MM`]) touches the top row at the center column.
//! Depth is measured radially from the probe surface. The pleura is an arc
//! at `pleura_depth_mm`; B-lines are bright rays leaving the pleural arc
//! radially and running to the bottom of the sector. Negative videos show
//! A-line reverberations at integer multiples of the pleural depth instead.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{io, quantize, Dataset, FrameAnnotation, LusVideo, Point};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::{ANNOTATION_STRIDE, FRAME_HEIGHT, FRAME_WIDTH};

pub const PROBE_RADIUS_MM: f64 = 20.0;
/// Smallest pairwise distance between the origins of one frame.
pub const MIN_ORIGIN_SEPARATION_MM: f64 = 7.0;
/// Standard deviation of a B-line's lateral Gaussian profile.
pub const BLINE_SIGMA_MM: f64 = 1.5;
pub const PHANTOM_ANNOTATOR: &str = "phantom";
pub const PHANTOM_FILE: &str = "phantom.json";

const PLEURA_SIGMA_MM: f64 = 0.7;
const PLEURA_INTENSITY: f64 = 0.7;
const ALINE_SIGMA_MM: f64 = 0.7;
const ALINE_INTENSITY: f64 = 0.4;
const TISSUE_INTENSITY: f64 = 0.25;
const LUNG_INTENSITY: f64 = 0.12;
/// Lateral amplitude of the respiratory sliding of the pleura.
const SLIDING_AMPLITUDE_MM: f64 = 2.0;
/// Keep origins at least this far (in mm along the arc) inside the sector.
const SECTOR_MARGIN_MM: f64 = 4.0;

fn default_bline_intensity() -> f64 {
    0.55
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub video_id: String,
    pub patient_id: String,
    pub n_blines: usize,
    pub pleura_depth_mm: f64,
    pub sector_angle_deg: f64,
    pub px_spacing_mm: f64,
    pub fps: f64,
    pub duration_s: f64,
    pub respiration_period_s: f64,
    pub speckle_sigma: f64,
    /// Brightness a B-line adds on top of the lung background.
    #[serde(default = "default_bline_intensity")]
    pub bline_intensity: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// A mid-range spec, convenient as a starting point.
    pub fn new(video_id: &str, patient_id: &str, n_blines: usize, seed: u64) -> Self {
        Self {
            video_id: video_id.to_string(),
            patient_id: patient_id.to_string(),
            n_blines,
            pleura_depth_mm: 25.0,
            sector_angle_deg: 65.0,
            px_spacing_mm: 0.4,
            fps: 20.0,
            duration_s: 2.0,
            respiration_period_s: 4.0,
            speckle_sigma: 0.25,
            bline_intensity: default_bline_intensity(),
            seed,
        }
    }

    pub fn n_frames(&self) -> usize {
        (self.fps * self.duration_s).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |name: &str, v: f64, lo: f64, hi: f64| -> Result<()> {
            if (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [{lo}, {hi}]")))
            }
        };
        in_range("pleura_depth_mm", self.pleura_depth_mm, 15.0, 40.0)?;
        in_range("sector_angle_deg", self.sector_angle_deg, 50.0, 80.0)?;
        in_range("px_spacing_mm", self.px_spacing_mm, 0.235, 0.8)?;
        in_range("fps", self.fps, 15.0, 46.0)?;
        if !(self.duration_s > 0.0) || !(self.respiration_period_s > 0.0) {
            return Err(Error::Config("duration and respiration period must be positive".into()));
        }
        if !(self.speckle_sigma >= 0.0) || !(self.bline_intensity > 0.0) {
            return Err(Error::Config("invalid speckle or B-line intensity".into()));
        }
        if self.n_frames() == 0 {
            return Err(Error::Config("spec yields zero frames".into()));
        }
        Ok(())
    }
}

/// Sector geometry in pixel units.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    apex_row: f64,
    apex_col: f64,
    spacing: f64,
    half_angle: f64,
    pleura_radius_mm: f64,
}

impl Geometry {
    fn new(spec: &PhantomSpec) -> Self {
        Self {
            apex_row: -PROBE_RADIUS_MM / spec.px_spacing_mm,
            apex_col: (FRAME_WIDTH as f64 - 1.0) / 2.0,
            spacing: spec.px_spacing_mm,
            half_angle: spec.sector_angle_deg.to_radians() / 2.0,
            pleura_radius_mm: PROBE_RADIUS_MM + spec.pleura_depth_mm,
        }
    }

    /// (radius in mm from the apex, angle from the vertical) of a pixel.
    fn polar(&self, r: usize, c: usize) -> (f64, f64) {
        let dy = (r as f64 - self.apex_row) * self.spacing;
        let dx = (c as f64 - self.apex_col) * self.spacing;
        (dy.hypot(dx), dx.atan2(dy))
    }

    fn origin_at(&self, angle: f64) -> Point {
        let rho = self.pleura_radius_mm / self.spacing;
        Point::new(self.apex_row + rho * angle.cos(), self.apex_col + rho * angle.sin())
    }

    fn in_sector(&self, angle: f64) -> bool {
        angle.abs() <= self.half_angle
    }
}

/// Static per-pixel quantities shared by all frames of a video.
struct Background {
    radius_mm: Vec<f64>,
    angle: Vec<f64>,
    base: Vec<f64>,
}

fn render_background(g: &Geometry, spec: &PhantomSpec) -> Background {
    let n = FRAME_HEIGHT * FRAME_WIDTH;
    let mut radius_mm = Vec::with_capacity(n);
    let mut angle = Vec::with_capacity(n);
    let mut base = Vec::with_capacity(n);
    for r in 0..FRAME_HEIGHT {
        for c in 0..FRAME_WIDTH {
            let (rho, theta) = g.polar(r, c);
            radius_mm.push(rho);
            angle.push(theta);
            if !g.in_sector(theta) || rho < PROBE_RADIUS_MM {
                base.push(0.0);
                continue;
            }
            let depth = rho - PROBE_RADIUS_MM;
            let mut v = if rho < g.pleura_radius_mm {
                // Layered chest wall.
                TISSUE_INTENSITY + 0.05 * (2.0 * PI * depth / 6.0).sin()
            } else {
                LUNG_INTENSITY
            };
            v += PLEURA_INTENSITY * gaussian(rho - g.pleura_radius_mm, PLEURA_SIGMA_MM);
            if spec.n_blines == 0 {
                let mut k = 2.0;
                let mut amp = ALINE_INTENSITY;
                while PROBE_RADIUS_MM + k * spec.pleura_depth_mm < rho + 4.0 * ALINE_SIGMA_MM {
                    let line = PROBE_RADIUS_MM + k * spec.pleura_depth_mm;
                    v += amp * gaussian(rho - line, ALINE_SIGMA_MM);
                    k += 1.0;
                    amp *= 0.7;
                }
            }
            base.push(v * (-depth / 200.0).exp());
        }
    }
    Background {
        radius_mm,
        angle,
        base,
    }
}

#[inline]
fn gaussian(x: f64, sigma: f64) -> f64 {
    (-x * x / (2.0 * sigma * sigma)).exp()
}

/// Lateral (angular) offset of all origins at frame `t`.
fn sliding_offset(spec: &PhantomSpec, g: &Geometry, amplitude_mm: f64, phase: f64, t: usize) -> f64 {
    let time = t as f64 / spec.fps;
    amplitude_mm / g.pleura_radius_mm * (2.0 * PI * time / spec.respiration_period_s + phase).sin()
}

fn origins_valid(g: &Geometry, angles: &[f64]) -> bool {
    angles.iter().all(|&a| {
        let p = g.origin_at(a);
        g.in_sector(a)
            && p.row >= 0.0
            && p.col >= 0.0
            && p.row <= (FRAME_HEIGHT - 1) as f64
            && p.col <= (FRAME_WIDTH - 1) as f64
    })
}

impl Geometry {
    /// Half-width of the angular range available to base origins: inside
    /// the sector and the frame, with room for the sliding motion.
    fn origin_half_range(&self) -> f64 {
        let rho = self.pleura_radius_mm / self.spacing;
        let half_width = (FRAME_WIDTH as f64 - 1.0) / 2.0;
        let in_frame = if rho > half_width { (half_width / rho).asin() } else { PI / 2.0 };
        let margin = (SECTOR_MARGIN_MM + SLIDING_AMPLITUDE_MM) / self.pleura_radius_mm;
        self.half_angle.min(in_frame) - margin
    }

    /// Chord length 2 R sin(d/2) >= separation.
    fn min_origin_gap(&self) -> f64 {
        2.0 * (MIN_ORIGIN_SEPARATION_MM / (2.0 * self.pleura_radius_mm)).asin()
    }
}

/// Largest number of B-lines a phantom's geometry can hold.
pub fn max_blines(spec: &PhantomSpec) -> usize {
    let g = Geometry::new(spec);
    let span = 2.0 * g.origin_half_range();
    if span < 0.0 {
        0
    } else {
        (span / g.min_origin_gap()).floor() as usize + 1
    }
}

/// Draws base angles whose origins are pairwise at least
/// [`MIN_ORIGIN_SEPARATION_MM`] apart on the pleural arc, uniformly over all
/// such configurations.
fn draw_angles(rng: &mut ChaCha8Rng, g: &Geometry, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let half = g.origin_half_range();
    let gap = g.min_origin_gap();
    let slack = 2.0 * half - (n - 1) as f64 * gap;
    if slack < 0.0 {
        return Err(Error::Config(format!(
            "cannot place {n} B-lines {MIN_ORIGIN_SEPARATION_MM} mm apart inside the sector"
        )));
    }
    let mut u: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=slack)).collect();
    u.sort_by(f64::total_cmp);
    let angles: Vec<f64> = u
        .iter()
        .enumerate()
        .map(|(i, x)| -half + x + i as f64 * gap)
        .collect();
    debug_assert!(origins_valid(g, &angles));
    Ok(angles)
}

/// Renders one video and its every-fourth-frame origin annotations.
pub fn generate_phantom_video(spec: &PhantomSpec) -> Result<(LusVideo, Vec<FrameAnnotation>)> {
    spec.validate()?;
    let g = Geometry::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_frames = spec.n_frames();

    let base_angles = draw_angles(&mut rng, &g, spec.n_blines)?;
    let phase = rng.random_range(0.0..2.0 * PI);
    // Shrink the sliding amplitude until every origin stays in the sector.
    let mut amplitude = SLIDING_AMPLITUDE_MM;
    let trajectory = loop {
        let traj: Vec<Vec<f64>> = (0..n_frames)
            .map(|t| {
                let off = sliding_offset(spec, &g, amplitude, phase, t);
                base_angles.iter().map(|a| a + off).collect()
            })
            .collect();
        if traj.iter().all(|a| origins_valid(&g, a)) {
            break traj;
        }
        amplitude /= 2.0;
        if amplitude < 1e-3 {
            amplitude = 0.0;
        }
    };

    let bg = render_background(&g, spec);
    let sigma = spec.speckle_sigma;
    let mut frames = Vec::with_capacity(n_frames);
    let mut annotations = Vec::new();
    for (t, angles) in trajectory.iter().enumerate() {
        let mut frame = Grid::<f32>::new(FRAME_HEIGHT, FRAME_WIDTH);
        let px = frame.as_mut_slice();
        for (i, out) in px.iter_mut().enumerate() {
            let mut v = bg.base[i];
            if v == 0.0 {
                continue;
            }
            let rho = bg.radius_mm[i];
            let theta = bg.angle[i];
            if !angles.is_empty() {
                let onset = if rho >= g.pleura_radius_mm {
                    1.0
                } else {
                    gaussian(g.pleura_radius_mm - rho, PLEURA_SIGMA_MM)
                };
                for &a in angles {
                    let lateral = rho * (theta - a).sin();
                    if lateral.abs() < 5.0 * BLINE_SIGMA_MM {
                        v += onset * spec.bline_intensity * gaussian(lateral, BLINE_SIGMA_MM);
                    }
                }
            }
            if sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                v *= (sigma * z - sigma * sigma / 2.0).exp();
            }
            *out = v.clamp(0.0, 1.0) as f32;
        }
        frames.push(quantize(&frame));
        if spec.n_blines > 0 && t % ANNOTATION_STRIDE == 0 {
            annotations.push(FrameAnnotation {
                video_id: spec.video_id.clone(),
                frame_index: t,
                annotator_id: PHANTOM_ANNOTATOR.to_string(),
                origins: angles.iter().map(|&a| g.origin_at(a)).collect(),
            });
        }
    }

    let video = LusVideo {
        video_id: spec.video_id.clone(),
        patient_id: spec.patient_id.clone(),
        frames,
        px_spacing_mm: spec.px_spacing_mm,
        fps: spec.fps,
        label: spec.n_blines > 0,
    };
    Ok((video, annotations))
}

/// Pleural arc radius (in pixels from the apex) and apex position, for
/// checking rendered ground truth.
pub fn pleural_arc(spec: &PhantomSpec) -> (f64, Point) {
    let g = Geometry::new(spec);
    (g.pleura_radius_mm / g.spacing, Point::new(g.apex_row, g.apex_col))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_patients: usize,
    pub videos_per_patient: usize,
    pub positive_fraction: f64,
    pub seed: u64,
    /// Fixed frame count per video; otherwise durations vary per video.
    #[serde(default)]
    pub frames_per_video: Option<usize>,
}

impl DatasetConfig {
    pub fn new(n_patients: usize, videos_per_patient: usize, positive_fraction: f64, seed: u64) -> Self {
        Self {
            n_patients,
            videos_per_patient,
            positive_fraction,
            seed,
            frames_per_video: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 6 {
            return Err(Error::Config(format!(
                "need at least 6 patients, got {}",
                self.n_patients
            )));
        }
        if self.videos_per_patient == 0 {
            return Err(Error::Config("videos_per_patient must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config(format!(
                "positive_fraction {} outside [0, 1]",
                self.positive_fraction
            )));
        }
        if self.frames_per_video == Some(0) {
            return Err(Error::Config("frames_per_video must be positive".into()));
        }
        Ok(())
    }
}

/// Draws one spec per video. Videos of a patient share pixel spacing, frame
/// rate, sector angle and (up to a small jitter) pleural depth.
pub fn dataset_specs(cfg: &DatasetConfig) -> Result<Vec<PhantomSpec>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.n_patients * cfg.videos_per_patient;
    let n_pos = (cfg.positive_fraction * total as f64).round() as usize;
    let mut positive = vec![false; total];
    positive[..n_pos].iter_mut().for_each(|p| *p = true);
    positive.shuffle(&mut rng);

    let mut specs = Vec::with_capacity(total);
    for p in 0..cfg.n_patients {
        let patient_id = format!("P{p:03}");
        let px_spacing_mm = rng.random_range(0.235..=0.8);
        let fps = rng.random_range(15.0f64..=46.0).round();
        let sector_angle_deg = rng.random_range(50.0..=80.0);
        let pleura_base: f64 = rng.random_range(17.0..=38.0);
        for v in 0..cfg.videos_per_patient {
            let k = p * cfg.videos_per_patient + v;
            let n_blines: usize = if positive[k] { rng.random_range(1..=4) } else { 0 };
            let duration_s = match cfg.frames_per_video {
                Some(n) => n as f64 / fps,
                None => rng.random_range(3.0..=6.0),
            };
            let mut spec = PhantomSpec {
                video_id: format!("{patient_id}_V{v:02}"),
                patient_id: patient_id.clone(),
                n_blines,
                pleura_depth_mm: (pleura_base + rng.random_range(-2.0..=2.0)).clamp(15.0, 40.0),
                sector_angle_deg,
                px_spacing_mm,
                fps,
                duration_s,
                respiration_period_s: rng.random_range(3.0..=5.0),
                speckle_sigma: rng.random_range(0.15..=0.35),
                bline_intensity: rng.random_range(0.45..=0.65),
                seed: rng.next_u64(),
            };
            spec.n_blines = n_blines.min(max_blines(&spec).max(1));
            specs.push(spec);
        }
    }
    Ok(specs)
}

/// Renders a whole synthetic dataset in memory.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<(Dataset, Vec<PhantomSpec>)> {
    let specs = dataset_specs(cfg)?;
    let mut dataset = Dataset::default();
    for spec in &specs {
        let (video, anns) = generate_phantom_video(spec)?;
        dataset.videos.push(video);
        dataset.annotations.extend(anns);
    }
    Ok((dataset, specs))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PhantomManifest {
    pub config: DatasetConfig,
    pub specs: Vec<PhantomSpec>,
}

/// Renders a dataset and writes it in the standard on-disk layout plus a
/// `phantom.json` sidecar with every spec.
pub fn write_phantom_dataset(dir: &Path, cfg: &DatasetConfig, overwrite: bool) -> Result<Dataset> {
    cfg.validate()?;
    io::prepare_output_dir(dir, overwrite)?;
    let (dataset, specs) = generate_dataset(cfg)?;
    io::write_dataset(dir, &dataset)?;
    io::write_json(
        &dir.join(PHANTOM_FILE),
        &PhantomManifest {
            config: cfg.clone(),
            specs,
        },
    )?;
    Ok(dataset)
}
