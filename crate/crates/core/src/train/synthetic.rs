//! Procedural two-class lesion images for desk-scale training runs.
//!
//! Both classes draw a soft elliptical lesion on a skin-toned background.
//! Benign lesions are brown with smooth low-frequency shading. Malignant
//! lesions are a darker, bluish brown covered in per-pixel speckle. The mean
//! colors of the two classes overlap, so texture carries part of the signal.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{DataError, DatasetManifest, SampleRecord, SourceCode};
use crate::label::Label;

pub const SYNTHETIC_SOURCE: &str = "synth";
pub const MANIFEST_FILE: &str = "manifest.csv";

fn jitter<R: Rng>(rng: &mut R, base: [f32; 3], amount: f32) -> [f32; 3] {
    base.map(|c| c + rng.random_range(-amount..=amount))
}

/// Renders one `size × size` image from its own seeded generator.
pub fn render_lesion(label: Label, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f32;
    let skin = jitter(rng, [0.80, 0.62, 0.54], 0.06);
    let (lesion, speckle) = match label {
        Label::Benign => (jitter(rng, [0.52, 0.36, 0.26], 0.08), 0.0),
        Label::Malignant => (jitter(rng, [0.42, 0.30, 0.32], 0.08), 0.16),
    };
    let center = [s / 2.0 + rng.random_range(-0.1..=0.1) * s, s / 2.0 + rng.random_range(-0.1..=0.1) * s];
    let radii = [rng.random_range(0.22..=0.38) * s, rng.random_range(0.22..=0.38) * s];
    let (sin, cos) = rng.random_range(0.0..std::f32::consts::PI).sin_cos();
    // Smooth shading: a few wide Gaussian bumps.
    let bumps: Vec<([f32; 2], f32, f32)> = (0..3)
        .map(|_| {
            let at = [rng.random_range(0.0..s), rng.random_range(0.0..s)];
            let sigma = rng.random_range(0.15..0.3) * s;
            let amp = rng.random_range(-0.08..0.08);
            (at, sigma, amp)
        })
        .collect();
    let edge = 1.5f32.max(s / 40.0);
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f32 - center[0], x as f32 - center[1]);
            let (u, v) = (cos * px + sin * py, -sin * px + cos * py);
            let r = ((u / radii[1]).powi(2) + (v / radii[0]).powi(2)).sqrt();
            let m = ((1.0 - r) * radii[0].min(radii[1]) / edge).clamp(0.0, 1.0);
            let shade: f32 = bumps
                .iter()
                .map(|(at, sigma, amp)| {
                    let d2 = (y as f32 - at[0]).powi(2) + (x as f32 - at[1]).powi(2);
                    amp * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum();
            let grain = if speckle > 0.0 {
                rng.random_range(-speckle..=speckle)
            } else {
                0.0
            };
            let sensor: f32 = rng.random_range(-0.02..=0.02);
            let px: [u8; 3] = std::array::from_fn(|c| {
                let lesion_c = lesion[c] + shade + grain;
                let v = skin[c] * (1.0 - m) + lesion_c * m + sensor;
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

/// Writes `n_per_class` PNGs per class under `out_dir/{benign,malignant}/`
/// and a manifest (`manifest.csv`) listing them relative to `out_dir`. The
/// returned manifest holds the paths joined onto `out_dir`.
pub fn synthetic_dataset(
    seed: u64,
    n_per_class: usize,
    size: usize,
    out_dir: &Path,
) -> Result<DatasetManifest, DataError> {
    assert!(n_per_class >= 1, "need at least one image per class");
    assert!(size >= 1, "image size must be positive");
    let source = SourceCode::new(SYNTHETIC_SOURCE).expect("valid code");
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| DataError::Io { path, source }
    };
    for label in Label::ALL {
        let dir = out_dir.join(label.as_str());
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    }
    let jobs: Vec<(Label, usize)> = Label::ALL
        .iter()
        .flat_map(|&l| (0..n_per_class).map(move |i| (l, i)))
        .collect();
    let relative: Vec<String> = jobs
        .par_iter()
        .enumerate()
        .map(|(stream, &(label, i))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream as u64);
            let rel = format!("{}/{}_{i:05}.png", label.as_str(), label.as_str());
            let path = out_dir.join(&rel);
            render_lesion(label, size, &mut rng)
                .save(&path)
                .map_err(|e| DataError::Io {
                    path: path.clone(),
                    source: std::io::Error::other(e.to_string()),
                })?;
            Ok(rel)
        })
        .collect::<Result<_, DataError>>()?;
    let record = |path: &Path, &(label, _): &(Label, usize)| SampleRecord::new(path, label, source.clone());
    let on_disk = DatasetManifest::new(
        relative.iter().zip(&jobs).map(|(rel, job)| record(Path::new(rel), job)).collect(),
        vec![source.clone()],
    )?;
    on_disk.save(&out_dir.join(MANIFEST_FILE))?;
    DatasetManifest::new(
        relative.iter().zip(&jobs).map(|(rel, job)| record(&out_dir.join(rel), job)).collect(),
        vec![source.clone()],
    )
}
