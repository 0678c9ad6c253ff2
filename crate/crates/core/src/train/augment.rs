//! Random geometric augmentation of `(3, H, W)` images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::resize_bilinear;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Rotation angle is drawn uniformly from `±rotation_deg`.
    pub rotation_deg: f32,
    pub rotation_prob: f32,
    /// Zoom factor is drawn log-uniformly from `[zoom_min, zoom_max]`; values
    /// above 1 magnify.
    pub zoom_min: f32,
    pub zoom_max: f32,
    pub zoom_prob: f32,
    /// Side of the random crop relative to the image, resized back afterwards.
    pub crop_fraction: f32,
    pub crop_prob: f32,
    pub hflip_prob: f32,
    pub vflip_prob: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 30.0,
            rotation_prob: 0.5,
            zoom_min: 0.8,
            zoom_max: 1.25,
            zoom_prob: 0.5,
            crop_fraction: 0.9,
            crop_prob: 0.5,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        Self {
            rotation_prob: 0.0,
            zoom_prob: 0.0,
            crop_prob: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::InvalidConfig(what.to_string()));
        for (name, p) in [
            ("rotation_prob", self.rotation_prob),
            ("zoom_prob", self.zoom_prob),
            ("crop_prob", self.crop_prob),
            ("hflip_prob", self.hflip_prob),
            ("vflip_prob", self.vflip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.rotation_deg.is_finite() && self.rotation_deg >= 0.0) {
            return bad("rotation_deg must be finite and non-negative");
        }
        if !(self.zoom_min > 0.0 && self.zoom_min <= self.zoom_max && self.zoom_max.is_finite()) {
            return bad("zoom range must satisfy 0 < zoom_min <= zoom_max");
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return bad("crop_fraction must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Concrete transform parameters for one image.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentParams {
    pub rotation_rad: f32,
    pub zoom: Option<f32>,
    /// `(y0, x0, height, width)` of the crop window.
    pub crop: Option<(usize, usize, usize, usize)>,
    pub hflip: bool,
    pub vflip: bool,
}

/// Draws parameters for an `h × w` image. The same number of values is
/// consumed from `rng` whatever the outcome.
pub fn sample_params<R: Rng>(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> AugmentParams {
    let draws: [f64; 9] = std::array::from_fn(|_| rng.random::<f64>());
    let hit = |u: f64, p: f32| u < p as f64;
    let mut out = AugmentParams::default();
    if hit(draws[0], cfg.rotation_prob) {
        out.rotation_rad = ((draws[1] * 2.0 - 1.0) * cfg.rotation_deg as f64).to_radians() as f32;
    }
    if hit(draws[2], cfg.zoom_prob) {
        let (lo, hi) = ((cfg.zoom_min as f64).ln(), (cfg.zoom_max as f64).ln());
        out.zoom = Some((lo + draws[3] * (hi - lo)).exp() as f32);
    }
    if hit(draws[4], cfg.crop_prob) {
        let ch = ((h as f64 * cfg.crop_fraction as f64).round() as usize).clamp(1, h);
        let cw = ((w as f64 * cfg.crop_fraction as f64).round() as usize).clamp(1, w);
        let y0 = ((draws[5] * (h - ch + 1) as f64) as usize).min(h - ch);
        let x0 = ((draws[6] * (w - cw + 1) as f64) as usize).min(w - cw);
        out.crop = Some((y0, x0, ch, cw));
    }
    out.hflip = hit(draws[7], cfg.hflip_prob);
    out.vflip = hit(draws[8], cfg.vflip_prob);
    out
}

/// Mirrors a continuous pixel coordinate into `[0, n − 1]` (edge pixels are
/// repeated at the fold, as in `dcba|abcd|dcba`).
fn reflect(u: f32, n: usize) -> f32 {
    let period = 2.0 * n as f32;
    let mut t = (u + 0.5).rem_euclid(period);
    if t >= n as f32 {
        t = period - t;
    }
    (t - 0.5).clamp(0.0, (n - 1) as f32)
}

fn sample_bilinear(plane: &[f32], (h, w): (usize, usize), y: f32, x: f32) -> f32 {
    let (y, x) = (reflect(y, h), reflect(x, w));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotation about the image center combined with zoom.
fn warp(img: &Tensor, angle: f32, zoom: f32) -> Tensor {
    let (c, h, w) = img.chw().expect("rank-3 image");
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = Vec::with_capacity(img.len());
    for plane in img.data().chunks(h * w) {
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f32 - cy) / zoom, (x as f32 - cx) / zoom);
                let sy = cy + cos * dy - sin * dx;
                let sx = cx + sin * dy + cos * dx;
                out.push(sample_bilinear(plane, (h, w), sy, sx));
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("same shape")
}

fn crop(img: &Tensor, (y0, x0, ch, cw): (usize, usize, usize, usize)) -> Tensor {
    let (c, h, w) = img.chw().expect("rank-3 image");
    let mut out = Vec::with_capacity(c * ch * cw);
    for plane in img.data().chunks(h * w) {
        for y in y0..y0 + ch {
            out.extend_from_slice(&plane[y * w + x0..y * w + x0 + cw]);
        }
    }
    let window = Tensor::new(vec![c, ch, cw], out).expect("inside the image");
    resize_bilinear(&window, h, w)
}

pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let (_, _, w) = img.chw().expect("rank-3 image");
    let mut data = img.data().to_vec();
    data.chunks_mut(w).for_each(|row| row.reverse());
    Tensor::new(img.dims().to_vec(), data).expect("same shape")
}

pub fn flip_vertical(img: &Tensor) -> Tensor {
    let (_, h, w) = img.chw().expect("rank-3 image");
    let mut data = img.data().to_vec();
    for plane in data.chunks_mut(h * w) {
        for y in 0..h / 2 {
            let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
            top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
    Tensor::new(img.dims().to_vec(), data).expect("same shape")
}

/// Rotation and zoom, then crop, then flips.
pub fn apply_params(img: &Tensor, p: &AugmentParams) -> Tensor {
    let (_, h, w) = img.chw().expect("rank-3 image");
    if h * w == 1 {
        return img.clone();
    }
    let mut out = img.clone();
    if p.rotation_rad != 0.0 || p.zoom.is_some() {
        out = warp(&out, p.rotation_rad, p.zoom.unwrap_or(1.0));
    }
    if let Some(window) = p.crop {
        out = crop(&out, window);
    }
    if p.hflip {
        out = flip_horizontal(&out);
    }
    if p.vflip {
        out = flip_vertical(&out);
    }
    out
}

pub fn augment<R: Rng>(img: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    let (_, h, w) = img.chw().expect("rank-3 image");
    let p = sample_params(cfg, h, w, rng);
    apply_params(img, &p)
}
