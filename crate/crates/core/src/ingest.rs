//! Frame loading and preprocessing: square crop, resize, undistortion, and
//! (source, target) pair sampling.

use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::config::{parse_key_values, Config};
use crate::error::{Result, ShadesError};
use crate::io;

/// A preprocessed color frame with values in `[0, 1]`, laid out `[H, W, 3]`.
#[derive(Debug, Clone)]
pub struct Frame {
    pub pixels: Array3<f64>,
    pub seq_id: String,
    pub index: usize,
}

impl Frame {
    pub fn new(pixels: Array3<f64>, seq_id: impl Into<String>, index: usize) -> Self {
        Self {
            pixels,
            seq_id: seq_id.into(),
            index,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

/// Pinhole intrinsics plus radial-tangential distortion (k1, k2, p1, p2, k3).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub k: [[f64; 3]; 3],
    pub dist: [f64; 5],
}

impl CameraModel {
    pub fn from_params(fx: f64, fy: f64, cx: f64, cy: f64, dist: [f64; 5]) -> Result<Self> {
        let cam = Self {
            k: [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]],
            dist,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Plain-text camera file: `fx`, `fy`, `cx`, `cy` required; distortion
    /// coefficients default to zero.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self> {
        let mut fx = None;
        let mut fy = None;
        let mut cx = None;
        let mut cy = None;
        let mut dist = [0.0; 5];
        for (key, value) in parse_key_values(text)? {
            let v: f64 = value.parse().map_err(|e| {
                ShadesError::InvalidCamera(format!("key '{key}': bad number: {e}"))
            })?;
            match key.as_str() {
                "fx" => fx = Some(v),
                "fy" => fy = Some(v),
                "cx" => cx = Some(v),
                "cy" => cy = Some(v),
                "k1" => dist[0] = v,
                "k2" => dist[1] = v,
                "p1" => dist[2] = v,
                "p2" => dist[3] = v,
                "k3" => dist[4] = v,
                other => {
                    return Err(ShadesError::InvalidCamera(format!("unknown key '{other}'")))
                }
            }
        }
        let need = |o: Option<f64>, name: &str| {
            o.ok_or_else(|| ShadesError::InvalidCamera(format!("missing key '{name}'")))
        };
        Self::from_params(
            need(fx, "fx")?,
            need(fy, "fy")?,
            need(cx, "cx")?,
            need(cy, "cy")?,
            dist,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.k[2] != [0.0, 0.0, 1.0] {
            return Err(ShadesError::InvalidCamera(
                "bottom row of K must be [0, 0, 1]".into(),
            ));
        }
        for row in &self.k {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(ShadesError::InvalidCamera("K has non-finite entries".into()));
            }
        }
        if !(self.fx() > 0.0 && self.fy() > 0.0) {
            return Err(ShadesError::InvalidCamera("fx and fy must be > 0".into()));
        }
        if self.det().abs() < 1e-12 {
            return Err(ShadesError::InvalidCamera("K is singular".into()));
        }
        Ok(())
    }

    pub fn fx(&self) -> f64 {
        self.k[0][0]
    }
    pub fn fy(&self) -> f64 {
        self.k[1][1]
    }
    pub fn cx(&self) -> f64 {
        self.k[0][2]
    }
    pub fn cy(&self) -> f64 {
        self.k[1][2]
    }

    fn det(&self) -> f64 {
        let k = &self.k;
        k[0][0] * (k[1][1] * k[2][2] - k[1][2] * k[2][1])
            - k[0][1] * (k[1][0] * k[2][2] - k[1][2] * k[2][0])
            + k[0][2] * (k[1][0] * k[2][1] - k[1][1] * k[2][0])
    }

    /// Inverse of K, valid for the affine form enforced by `validate`.
    pub fn k_inv(&self) -> [[f64; 3]; 3] {
        let (fx, fy, cx, cy) = (self.fx(), self.fy(), self.cx(), self.cy());
        let s = self.k[0][1];
        // inverse of [[fx, s, cx], [0, fy, cy], [0, 0, 1]]
        [
            [1.0 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy)],
            [0.0, 1.0 / fy, -cy / fy],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Rescale intrinsics after crop and resize: `crop` is the (row, col)
    /// offset of the crop window and `scale` the resize factor.
    pub fn adjusted(&self, crop: (f64, f64), scale: f64) -> Self {
        let mut k = self.k;
        k[0][2] -= crop.1;
        k[1][2] -= crop.0;
        for row in k.iter_mut().take(2) {
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        Self { k, dist: self.dist }
    }
}

/// One training pair: a target frame and a source frame `gap` steps away.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub target: Frame,
    pub source: Frame,
    pub gap: i64,
}

/// Crop to the centered largest square, then bilinearly resize to
/// `out_size` x `out_size`.
pub fn crop_resize(frame: &Frame, out_size: usize) -> Result<Frame> {
    let (h, w, _) = frame.pixels.dim();
    if h == 0 || w == 0 {
        return Err(ShadesError::InvalidInput("empty image".into()));
    }
    if out_size == 0 {
        return Err(ShadesError::InvalidInput("out_size must be >= 1".into()));
    }
    let side = h.min(w);
    let r0 = (h - side) / 2;
    let c0 = (w - side) / 2;
    let cropped = frame
        .pixels
        .slice(ndarray::s![r0..r0 + side, c0..c0 + side, ..]);

    let pixels = if side == out_size {
        cropped.to_owned()
    } else {
        let scale = side as f64 / out_size as f64;
        let mut out = Array3::zeros((out_size, out_size, 3));
        for i in 0..out_size {
            for j in 0..out_size {
                // half-pixel-centre convention keeps same-size resize exact
                let sy = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
                let sx = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(side - 1);
                let x1 = (x0 + 1).min(side - 1);
                let b = sy - y0 as f64;
                let a = sx - x0 as f64;
                for c in 0..3 {
                    out[[i, j, c]] = (1.0 - a) * (1.0 - b) * cropped[[y0, x0, c]]
                        + a * (1.0 - b) * cropped[[y0, x1, c]]
                        + (1.0 - a) * b * cropped[[y1, x0, c]]
                        + a * b * cropped[[y1, x1, c]];
                }
            }
        }
        out
    };
    Ok(Frame::new(pixels, frame.seq_id.clone(), frame.index))
}

/// Inverse-mapping undistortion: each output pixel samples the input at the
/// position given by the forward radial-tangential model. Out-of-bounds
/// samples are filled with zero.
pub fn undistort(frame: &Frame, cam: &CameraModel) -> Result<Frame> {
    cam.validate()?;
    let (h, w, _) = frame.pixels.dim();
    let [k1, k2, p1, p2, k3] = cam.dist;
    let (fx, fy, cx, cy) = (cam.fx(), cam.fy(), cam.cx(), cam.cy());
    let mut out = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let x = (j as f64 - cx) / fx;
            let y = (i as f64 - cy) / fy;
            let r2 = x * x + y * y;
            let radial = 1.0 + k1 * r2 + k2 * r2 * r2 + k3 * r2 * r2 * r2;
            let xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
            let yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
            let u = fx * xd + cx;
            let v = fy * yd + cy;
            let sample = bilinear_zero_fill(&frame.pixels, u, v);
            for c in 0..3 {
                out[[i, j, c]] = sample[c];
            }
        }
    }
    Ok(Frame::new(out, frame.seq_id.clone(), frame.index))
}

fn bilinear_zero_fill(img: &Array3<f64>, u: f64, v: f64) -> [f64; 3] {
    let (h, w, _) = img.dim();
    let x0f = u.floor();
    let y0f = v.floor();
    let a = u - x0f;
    let b = v - y0f;
    let (x0, y0) = (x0f as i64, y0f as i64);
    let mut out = [0.0; 3];
    let mut tap = |y: i64, x: i64, wgt: f64| {
        if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
            for (c, o) in out.iter_mut().enumerate() {
                *o += wgt * img[[y as usize, x as usize, c]];
            }
        }
    };
    tap(y0, x0, (1.0 - a) * (1.0 - b));
    tap(y0, x0 + 1, a * (1.0 - b));
    tap(y0 + 1, x0, (1.0 - a) * b);
    tap(y0 + 1, x0 + 1, a * b);
    out
}

/// Target/source index pairs for a sequence of `len` frames: every target `t`
/// yields one pair per gap `g` with `0 <= t + g < len`, in (t, then gap)
/// order.
pub fn pair_indices(len: usize, gaps: &[i64]) -> Vec<(usize, usize, i64)> {
    let mut sorted: Vec<i64> = gaps.to_vec();
    sorted.sort_unstable();
    let mut out = Vec::new();
    for t in 0..len as i64 {
        for &g in &sorted {
            let s = t + g;
            if s >= 0 && s < len as i64 {
                out.push((t as usize, s as usize, g));
            }
        }
    }
    out
}

/// Materialized [`FramePair`]s for a frame sequence.
pub fn sample_pairs(sequence: &[Frame], gaps: &[i64]) -> Result<Vec<FramePair>> {
    if sequence.len() < 2 {
        return Err(ShadesError::InsufficientFrames {
            got: sequence.len(),
        });
    }
    Ok(pair_indices(sequence.len(), gaps)
        .into_iter()
        .map(|(t, s, gap)| FramePair {
            target: sequence[t].clone(),
            source: sequence[s].clone(),
            gap,
        })
        .collect())
}

/// Image files of a sequence directory, sorted by file name.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Load and fully preprocess one sequence directory: crop, resize,
/// undistort, capped at `frame_cap` frames when non-zero.
pub fn load_sequence(dir: &Path, cam: &CameraModel, cfg: &Config) -> Result<Vec<Frame>> {
    let seq_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "seq".to_string());
    let mut files = list_frame_files(dir)?;
    if cfg.frame_cap > 0 && files.len() > cfg.frame_cap {
        files.truncate(cfg.frame_cap);
    }
    let mut frames = Vec::with_capacity(files.len());
    for (index, path) in files.iter().enumerate() {
        let raw = io::load_rgb(path)?;
        let frame = Frame::new(raw, seq_id.clone(), index);
        let frame = crop_resize(&frame, cfg.out_size)?;
        let frame = undistort(&frame, cam)?;
        frames.push(frame);
    }
    Ok(frames)
}

/// Sequence directories under a data root: subdirectories that contain image
/// files, skipping `_rem`/`_mask` prior caches. A root that itself contains
/// images is treated as a single sequence.
pub fn list_sequences(data_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(data_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned());
            let name = name.unwrap_or_default();
            !name.ends_with("_rem") && !name.ends_with("_mask")
        })
        .filter(|p| list_frame_files(p).map(|f| !f.is_empty()).unwrap_or(false))
        .collect();
    dirs.sort();
    if dirs.is_empty() && !list_frame_files(data_dir)?.is_empty() {
        dirs.push(data_dir.to_path_buf());
    }
    Ok(dirs)
}
