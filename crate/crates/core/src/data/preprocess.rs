//! Decoding and resizing images into network input.
//!
//! Pixels are scaled to `[0, 1]` by `/255`, then bilinearly resampled with
//! half-pixel centers (`src = (dst + 0.5)·in/out − 0.5`, clamped to the
//! edge). The browser build runs these same functions on canvas pixels.

use std::path::Path;

use image::{DynamicImage, ImageReader};

use super::DataError;
use crate::tensor::Tensor;

pub const DEFAULT_TARGET_SIZE: usize = 150;

struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(input - 1),
                frac: (src - lo as f64) as f32,
            }
        })
        .collect()
}

/// Bilinear resize of every channel plane of a `(C, H, W)` tensor.
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = src.chw().expect("rank-3 tensor");
    assert!(out_h > 0 && out_w > 0, "resize target must be non-empty");
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in src.data().chunks(h * w) {
        for t in &ty {
            let (r0, r1) = (&plane[t.lo * w..(t.lo + 1) * w], &plane[t.hi * w..(t.hi + 1) * w]);
            for s in &tx {
                let top = r0[s.lo] * (1.0 - s.frac) + r0[s.hi] * s.frac;
                let bottom = r1[s.lo] * (1.0 - s.frac) + r1[s.hi] * s.frac;
                out.push(top * (1.0 - t.frac) + bottom * t.frac);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("sized above")
}

/// Packed 8-bit pixels with `stride` bytes per pixel (3 for RGB, 4 for RGBA)
/// to a `(3, target, target)` tensor.
fn from_packed(width: usize, height: usize, pixels: &[u8], stride: usize, target: usize) -> Tensor {
    assert!(width > 0 && height > 0, "image must be non-empty");
    assert_eq!(pixels.len(), width * height * stride, "pixel buffer size");
    let plane = width * height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in pixels.chunks_exact(stride).enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px[ch] as f32 / 255.0;
        }
    }
    let t = Tensor::new(vec![3, height, width], data).expect("sized above");
    resize_bilinear(&t, target, target)
}

pub fn preprocess_rgb(width: usize, height: usize, rgb: &[u8], target: usize) -> Tensor {
    from_packed(width, height, rgb, 3, target)
}

/// Alpha is ignored.
pub fn preprocess_rgba(width: usize, height: usize, rgba: &[u8], target: usize) -> Tensor {
    from_packed(width, height, rgba, 4, target)
}

fn from_dynamic(img: DynamicImage, target: usize) -> Tensor {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    preprocess_rgb(w as usize, h as usize, rgb.as_raw(), target)
}

/// Decodes an encoded JPEG or PNG held in memory.
pub fn preprocess_bytes(bytes: &[u8], target: usize) -> Result<Tensor, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    Ok(from_dynamic(img, target))
}

/// Decodes, converts to RGB (grey is replicated), scales to `[0, 1]` and
/// resizes to `target × target`.
pub fn preprocess(path: &Path, target: usize) -> Result<Tensor, DataError> {
    let decode = |reason: String| DataError::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let img = ImageReader::open(path)
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|e| decode(e.to_string()))?
        .decode()
        .map_err(|e| decode(e.to_string()))?;
    Ok(from_dynamic(img, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    #[test]
    fn same_size_is_plain_scaling() {
        let rgb: Vec<u8> = (0..150 * 150 * 3).map(|i| (i % 251) as u8).collect();
        let t = preprocess_rgb(150, 150, &rgb, 150);
        assert_eq!(t.dims(), &[3, 150, 150]);
        assert_eq!(t.at(0, 0, 0), rgb[0] as f32 / 255.0);
        assert_eq!(t.at(2, 149, 149), rgb[rgb.len() - 1] as f32 / 255.0);
        assert_eq!(t.at(1, 3, 7), rgb[(3 * 150 + 7) * 3 + 1] as f32 / 255.0);
    }

    #[test]
    fn constant_field_stays_constant() {
        let rgb = vec![128u8; 300 * 300 * 3];
        let t = preprocess_rgb(300, 300, &rgb, 150);
        assert!(t.data().iter().all(|&v| (v - 128.0 / 255.0).abs() <= 1e-6));
    }

    #[test]
    fn checkerboard_upscale_matches_hand_weights() {
        // 2 -> 4 with half-pixel centers samples source coordinates
        // -0.25 (clamped to 0), 0.25, 0.75 and 1.25 (clamped to 1); the weight
        // on source index 0 is therefore [1, 0.75, 0.25, 0].
        let a = [1.0f64, 0.75, 0.25, 0.0];
        let board = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = resize_bilinear(&board, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                let expect = a[y] * (1.0 - a[x]) + (1.0 - a[y]) * a[x];
                assert!((up.at(0, y, x) as f64 - expect).abs() <= 1e-6, "({y},{x})");
            }
        }
    }

    #[test]
    fn decodes_png_and_replicates_grey() {
        let dir = tempfile::tempdir().unwrap();
        let grey = dir.path().join("g.png");
        GrayImage::from_pixel(20, 10, Luma([51])).save(&grey).unwrap();
        let t = preprocess(&grey, 8).unwrap();
        assert_eq!(t.dims(), &[3, 8, 8]);
        assert!(t.data().iter().all(|&v| (v - 0.2).abs() < 1e-6));

        let color = dir.path().join("c.png");
        let mut img = RgbImage::new(4, 4);
        img.put_pixel(0, 0, Rgb([255, 0, 10]));
        img.save(&color).unwrap();
        let t = preprocess(&color, 4).unwrap();
        assert_eq!(t.at(0, 0, 0), 1.0);
        assert_eq!(t.at(2, 0, 0), 10.0 / 255.0);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn undecodable_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let bogus = dir.path().join("x.png");
        std::fs::write(&bogus, b"definitely not an image").unwrap();
        assert!(matches!(preprocess(&bogus, 8), Err(DataError::Decode { .. })));
        assert!(matches!(preprocess(&dir.path().join("missing.jpg"), 8), Err(DataError::Io { .. })));
    }
}
