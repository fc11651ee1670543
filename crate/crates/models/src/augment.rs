//! On-the-fly augmentation of frames, clips and their label maps.

use bline_core::Grid;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Per-transform probabilities and magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Probability of one random affine map (translation, rotation, scale).
    pub affine_p: f64,
    /// Maximum translation as a fraction of width/height.
    pub translate_frac: f64,
    pub rotate_deg: f64,
    pub scale_range: (f64, f64),
    pub flip_p: f64,
    pub occlusion_p: f64,
    /// Maximum occluded fraction of the frame area.
    pub occlusion_max_area: f64,
    pub intensity_p: f64,
    /// Additive brightness range, +/-.
    pub brightness: f64,
    /// Multiplicative contrast range, 1 +/-.
    pub contrast: f64,
    pub noise_p: f64,
    pub noise_sigma_max: f64,
    pub blur_p: f64,
    pub blur_sigma_max: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            affine_p: 0.5,
            translate_frac: 0.10,
            rotate_deg: 15.0,
            scale_range: (0.85, 1.15),
            flip_p: 0.5,
            occlusion_p: 0.3,
            occlusion_max_area: 0.20,
            intensity_p: 0.5,
            brightness: 0.20,
            contrast: 0.20,
            noise_p: 0.3,
            noise_sigma_max: 0.03,
            blur_p: 0.3,
            blur_sigma_max: 1.5,
        }
    }
}

impl AugmentationPolicy {
    /// Policy that never transforms anything.
    pub fn none() -> Self {
        Self {
            affine_p: 0.0,
            flip_p: 0.0,
            occlusion_p: 0.0,
            intensity_p: 0.0,
            noise_p: 0.0,
            blur_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("affine_p", self.affine_p),
            ("flip_p", self.flip_p),
            ("occlusion_p", self.occlusion_p),
            ("intensity_p", self.intensity_p),
            ("noise_p", self.noise_p),
            ("blur_p", self.blur_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(format!("scale_range must satisfy 0 < lo <= hi, got {lo}..{hi}"));
        }
        for (name, v) in [
            ("translate_frac", self.translate_frac),
            ("rotate_deg", self.rotate_deg),
            ("occlusion_max_area", self.occlusion_max_area),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("noise_sigma_max", self.noise_sigma_max),
            ("blur_sigma_max", self.blur_sigma_max),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.occlusion_max_area > 1.0 || self.contrast >= 1.0 {
            return Err("occlusion_max_area must be <= 1 and contrast < 1".into());
        }
        Ok(())
    }
}

/// One or more frames (a clip) with an optional label map for frame 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frames: Vec<Grid<f32>>,
    pub label: Option<Grid<u8>>,
}

/// Forward map `p' = c + s R(theta) (p - c) + t` in (row, col) coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub angle_rad: f64,
    pub scale: f64,
    pub translate: (f64, f64),
    pub center: (f64, f64),
}

impl Affine {
    pub fn apply(&self, (r, c): (f64, f64)) -> (f64, f64) {
        let (s, co) = self.angle_rad.sin_cos();
        let (dr, dc) = (r - self.center.0, c - self.center.1);
        (
            self.center.0 + self.scale * (co * dr - s * dc) + self.translate.0,
            self.center.1 + self.scale * (s * dr + co * dc) + self.translate.1,
        )
    }

    pub fn invert(&self, (r, c): (f64, f64)) -> (f64, f64) {
        let (s, co) = self.angle_rad.sin_cos();
        let (dr, dc) = (
            (r - self.center.0 - self.translate.0) / self.scale,
            (c - self.center.1 - self.translate.1) / self.scale,
        );
        (
            self.center.0 + co * dr + s * dc,
            self.center.1 - s * dr + co * dc,
        )
    }
}

/// Bilinear warp with zero fill outside the source.
pub fn warp_image(img: &Grid<f32>, map: &Affine) -> Grid<f32> {
    let (rows, cols) = img.shape();
    Grid::from_fn(rows, cols, |r, c| {
        let (sr, sc) = map.invert((r as f64, c as f64));
        let (r0, c0) = (sr.floor(), sc.floor());
        let (fr, fc) = ((sr - r0) as f32, (sc - c0) as f32);
        let at = |rr: f64, cc: f64| -> f32 {
            if rr < 0.0 || cc < 0.0 || rr >= rows as f64 || cc >= cols as f64 {
                0.0
            } else {
                img.get(rr as usize, cc as usize)
            }
        };
        let top = at(r0, c0) + (at(r0, c0 + 1.0) - at(r0, c0)) * fc;
        let bottom = at(r0 + 1.0, c0) + (at(r0 + 1.0, c0 + 1.0) - at(r0 + 1.0, c0)) * fc;
        top + (bottom - top) * fr
    })
}

/// Nearest-neighbour warp for label maps (values stay binary).
pub fn warp_label(label: &Grid<u8>, map: &Affine) -> Grid<u8> {
    let (rows, cols) = label.shape();
    Grid::from_fn(rows, cols, |r, c| {
        let (sr, sc) = map.invert((r as f64, c as f64));
        let (rr, cc) = (sr.round(), sc.round());
        if rr < 0.0 || cc < 0.0 || rr >= rows as f64 || cc >= cols as f64 {
            0
        } else {
            label.get(rr as usize, cc as usize)
        }
    })
}

pub fn flip_horizontal<T: Copy>(g: &Grid<T>) -> Grid<T> {
    let cols = g.cols();
    Grid::from_fn(g.rows(), cols, |r, c| g.get(r, cols - 1 - c))
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| (v / sum) as f32).collect()
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &Grid<f32>, sigma: f64) -> Grid<f32> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let (rows, cols) = img.shape();
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let tmp = Grid::from_fn(rows, cols, |r, c| {
        k.iter()
            .enumerate()
            .map(|(i, w)| w * img.get(r, clampi(c as i64 + i as i64 - radius, cols)))
            .sum::<f32>()
    });
    Grid::from_fn(rows, cols, |r, c| {
        k.iter()
            .enumerate()
            .map(|(i, w)| w * tmp.get(clampi(r as i64 + i as i64 - radius, rows), c))
            .sum::<f32>()
    })
}

fn clamp01(g: &mut Grid<f32>) {
    g.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Draws the random affine map for a `rows x cols` frame.
pub fn random_affine<R: Rng>(policy: &AugmentationPolicy, rows: usize, cols: usize, rng: &mut R) -> Affine {
    let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let (lo, hi) = policy.scale_range;
    Affine {
        angle_rad: sym(rng, policy.rotate_deg).to_radians(),
        scale: if hi > lo { rng.random_range(lo..=hi) } else { lo },
        translate: (
            sym(rng, policy.translate_frac * rows as f64),
            sym(rng, policy.translate_frac * cols as f64),
        ),
        center: ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0),
    }
}

/// Applies each transform independently with its probability. Spatial
/// transforms are shared by all frames and the label map.
pub fn augment<R: Rng>(sample: &Sample, policy: &AugmentationPolicy, rng: &mut R) -> Sample {
    let mut out = sample.clone();
    let Some(first) = sample.frames.first() else {
        return out;
    };
    let (rows, cols) = first.shape();

    if rng.random_bool(policy.affine_p) {
        let map = random_affine(policy, rows, cols, rng);
        out.frames = out.frames.iter().map(|f| warp_image(f, &map)).collect();
        out.label = out.label.as_ref().map(|l| warp_label(l, &map));
    }
    if rng.random_bool(policy.flip_p) {
        out.frames = out.frames.iter().map(flip_horizontal).collect();
        out.label = out.label.as_ref().map(flip_horizontal);
    }
    if rng.random_bool(policy.occlusion_p) && policy.occlusion_max_area > 0.0 {
        let area = rng.random_range(0.0..=policy.occlusion_max_area) * (rows * cols) as f64;
        let aspect: f64 = rng.random_range(0.5..=2.0);
        let h = ((area * aspect).sqrt().round() as usize).clamp(1, rows);
        let w = ((area / h as f64).floor() as usize).clamp(1, cols);
        let top = rng.random_range(0..=rows - h);
        let left = rng.random_range(0..=cols - w);
        for f in &mut out.frames {
            for r in top..top + h {
                for c in left..left + w {
                    f.set(r, c, 0.0);
                }
            }
        }
    }
    if rng.random_bool(policy.intensity_p) {
        let b = if policy.brightness > 0.0 {
            rng.random_range(-policy.brightness..=policy.brightness)
        } else {
            0.0
        } as f32;
        let k = if policy.contrast > 0.0 {
            rng.random_range(1.0 - policy.contrast..=1.0 + policy.contrast)
        } else {
            1.0
        } as f32;
        for f in &mut out.frames {
            f.as_mut_slice().iter_mut().for_each(|v| *v = (*v - 0.5) * k + 0.5 + b);
            clamp01(f);
        }
    }
    if rng.random_bool(policy.noise_p) && policy.noise_sigma_max > 0.0 {
        let sigma = rng.random_range(0.0..=policy.noise_sigma_max);
        if let Ok(dist) = Normal::new(0.0, sigma) {
            for f in &mut out.frames {
                f.as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v += dist.sample(rng) as f32);
                clamp01(f);
            }
        }
    }
    if rng.random_bool(policy.blur_p) && policy.blur_sigma_max > 0.0 {
        let sigma = rng.random_range(0.0..=policy.blur_sigma_max);
        out.frames = out.frames.iter().map(|f| gaussian_blur(f, sigma)).collect();
    }
    for f in &mut out.frames {
        clamp01(f);
    }
    out
}
