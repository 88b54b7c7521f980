//! PNG reading and writing for frames, masks, and depth maps.
//!
//! Depth maps are stored as 16-bit grayscale PNG plus a JSON sidecar giving
//! the value range, so `u = 0` stays reserved for invalid pixels. Cache and
//! output writes go through a temp-file-then-rename step so concurrent
//! producers never expose half-written files.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShadesError};

/// Load any supported image as `[H, W, 3]` in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?;
    Ok(match img {
        DynamicImage::ImageLuma16(g) => {
            let (w, h) = g.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 3), |(i, j, _)| {
                g.get_pixel(j as u32, i as u32)[0] as f64 / 65535.0
            })
        }
        DynamicImage::ImageRgb16(rgb) => {
            let (w, h) = rgb.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 3), |(i, j, c)| {
                rgb.get_pixel(j as u32, i as u32)[c] as f64 / 65535.0
            })
        }
        DynamicImage::ImageRgba16(rgb) => {
            let (w, h) = rgb.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 3), |(i, j, c)| {
                rgb.get_pixel(j as u32, i as u32)[c] as f64 / 65535.0
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 3), |(i, j, c)| {
                rgb.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
            })
        }
    })
}

/// Save `[H, W, 3]` in `[0, 1]` as 8-bit RGB PNG (values clamped).
pub fn save_rgb8(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let mut img = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = |c: usize| (pixels[[i, j, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(j as u32, i as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    atomic_save(path, |tmp| img.save(tmp).map_err(Into::into))
}

/// Save `[H, W, 3]` in `[0, 1]` as 16-bit RGB PNG (values clamped).
pub fn save_rgb16(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let mut img = ImageBuffer::<Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = |c: usize| (pixels[[i, j, c]].clamp(0.0, 1.0) * 65535.0).round() as u16;
            img.put_pixel(j as u32, i as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    atomic_save(path, |tmp| img.save(tmp).map_err(Into::into))
}

/// Save a binary mask (`0/1` values) as an 8-bit `{0, 255}` PNG.
pub fn save_mask(path: &Path, mask: &Array2<f64>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = ImageBuffer::<Luma<u8>, Vec<u8>>::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            img.put_pixel(j as u32, i as u32, Luma([if mask[[i, j]] > 0.5 { 255 } else { 0 }]));
        }
    }
    atomic_save(path, |tmp| img.save(tmp).map_err(Into::into))
}

/// Load a `{0, 255}` PNG as a `0/1` mask.
pub fn load_mask(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        if img.get_pixel(j as u32, i as u32)[0] > 127 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Value range sidecar for 16-bit depth PNGs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DepthScale {
    pub min: f64,
    pub max: f64,
}

fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Write depth as a 16-bit PNG plus `{min, max}` sidecar. Valid pixels map to
/// `[1, 65535]`; the PNG value 0 is reserved for invalid pixels (non-finite
/// or non-positive depth).
pub fn save_depth(path: &Path, depth: &Array2<f64>) -> Result<()> {
    let valid: Vec<f64> = depth
        .iter()
        .copied()
        .filter(|d| d.is_finite() && *d > 0.0)
        .collect();
    let (min, max) = valid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| {
            (lo.min(d), hi.max(d))
        });
    let (min, max) = if valid.is_empty() { (0.0, 1.0) } else { (min, max) };
    let span = (max - min).max(1e-12);
    let (h, w) = depth.dim();
    let mut img = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let d = depth[[i, j]];
            let u = if d.is_finite() && d > 0.0 {
                1 + ((d - min) / span * 65534.0).round() as u16
            } else {
                0
            };
            img.put_pixel(j as u32, i as u32, Luma([u]));
        }
    }
    atomic_save(path, |tmp| img.save(tmp).map_err(Into::into))?;
    let sidecar = serde_json::to_string_pretty(&DepthScale { min, max })
        .expect("DepthScale serializes");
    atomic_save(&sidecar_path(path), |tmp| {
        std::fs::write(tmp, &sidecar).map_err(Into::into)
    })
}

/// Read a 16-bit depth PNG with its sidecar. Returns the depth map and the
/// validity mask (0 = invalid, following the "zero pixels mean invalid" rule).
/// When no per-image sidecar exists, a directory-wide `depth_scale.json` is
/// accepted.
pub fn load_depth(path: &Path) -> Result<(Array2<f64>, Array2<f64>)> {
    let img = image::open(path)?;
    let g16 = match img {
        DynamicImage::ImageLuma16(g) => g,
        other => {
            let g8 = other.to_luma8();
            let (w, h) = g8.dimensions();
            ImageBuffer::from_fn(w, h, |x, y| Luma([g8.get_pixel(x, y)[0] as u16 * 257]))
        }
    };
    let scale = read_depth_scale(path)?;
    let (w, h) = g16.dimensions();
    let mut depth = Array2::zeros((h as usize, w as usize));
    let mut valid = Array2::zeros((h as usize, w as usize));
    let span = scale.max - scale.min;
    for i in 0..h as usize {
        for j in 0..w as usize {
            let u = g16.get_pixel(j as u32, i as u32)[0];
            if u > 0 {
                depth[[i, j]] = scale.min + (u - 1) as f64 / 65534.0 * span;
                valid[[i, j]] = 1.0;
            }
        }
    }
    Ok((depth, valid))
}

fn read_depth_scale(png: &Path) -> Result<DepthScale> {
    let per_image = sidecar_path(png);
    let candidate = if per_image.exists() {
        per_image
    } else {
        let dir_wide = png
            .parent()
            .map(|p| p.join("depth_scale.json"))
            .unwrap_or_default();
        if dir_wide.exists() {
            dir_wide
        } else {
            return Err(ShadesError::MissingArtifacts(format!(
                "no depth scale sidecar for {}",
                png.display()
            )));
        }
    };
    let text = std::fs::read_to_string(&candidate)?;
    serde_json::from_str(&text).map_err(|e| {
        ShadesError::InvalidInput(format!("bad depth sidecar {}: {e}", candidate.display()))
    })
}

/// Write via a temp file in the same directory, then rename into place.
pub fn atomic_save<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| ShadesError::InvalidInput(format!("bad path {}", path.display())))?;
    let tmp = dir.join(format!(".tmp.{}.{}", std::process::id(), file_name.to_string_lossy()));
    write(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
