//! Classical specular highlight segmentation and harmonic inpainting. The
//! output pair (inpainted frame, binary mask) is the training prior: the
//! inpainted frame stands in for the specular-free image and the mask records
//! which pixels were synthesized.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::error::{Result, ShadesError};
use crate::ingest::Frame;
use crate::io;

/// Binary specular segmentation (1 = specular).
#[derive(Debug, Clone)]
pub struct SpecularMaskTrad {
    pub mask: Array2<f64>,
}

/// A frame with masked pixels replaced by a harmonic fill. Pixels outside the
/// mask are bit-identical to the source frame.
#[derive(Debug, Clone)]
pub struct InpaintedFrame {
    pub pixels: Array3<f64>,
    pub source_mask: SpecularMaskTrad,
}

/// Segmentation thresholds. A pixel is flagged when its min-channel value is
/// strictly above the `percentile`-th percentile of the frame's min-channel
/// distribution and its saturation `(max-min)/max` is below
/// `saturation_max`; the flagged set is then dilated by `dilate_radius`
/// (Chebyshev disc).
#[derive(Debug, Clone, Copy)]
pub struct SegmentParams {
    pub percentile: f64,
    pub saturation_max: f64,
    pub dilate_radius: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            percentile: 97.0,
            saturation_max: 0.25,
            dilate_radius: 2,
        }
    }
}

/// Harmonic fill controls: iterate 4-neighbour averaging over the masked
/// pixels until the largest per-pixel change drops below `tol` or
/// `max_iters` is reached.
#[derive(Debug, Clone, Copy)]
pub struct InpaintParams {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for InpaintParams {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iters: 2000,
        }
    }
}

/// Nearest-rank percentile of a value slice. `p` in [0, 100].
fn percentile(values: &[f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite pixel values"));
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Flag bright, desaturated pixels as specular.
pub fn segment_specular(frame: &Frame, params: &SegmentParams) -> SpecularMaskTrad {
    let (h, w, _) = frame.pixels.dim();
    let mut min_ch = Array2::zeros((h, w));
    let mut raw = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for c in 0..3 {
                let v = frame.pixels[[i, j, c]];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            min_ch[[i, j]] = lo;
            let sat = if hi > 1e-12 { (hi - lo) / hi } else { 0.0 };
            raw[[i, j]] = f64::from(sat < params.saturation_max);
        }
    }
    let thresh = percentile(min_ch.as_slice().expect("contiguous"), params.percentile);
    for i in 0..h {
        for j in 0..w {
            if min_ch[[i, j]] <= thresh {
                raw[[i, j]] = 0.0;
            }
        }
    }
    SpecularMaskTrad {
        mask: dilate(&raw, params.dilate_radius),
    }
}

/// Binary dilation with a square (Chebyshev) structuring element.
pub fn dilate(mask: &Array2<f64>, radius: usize) -> Array2<f64> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let r = radius as i64;
    let mut out = Array2::zeros((h, w));
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            'search: for di in -r..=r {
                for dj in -r..=r {
                    let (y, x) = (i + di, j + dj);
                    if y >= 0 && y < h as i64 && x >= 0 && x < w as i64
                        && mask[[y as usize, x as usize]] > 0.5
                    {
                        out[[i as usize, j as usize]] = 1.0;
                        break 'search;
                    }
                }
            }
        }
    }
    out
}

/// Replace masked pixels with the harmonic (diffusion) fill of their
/// boundary. Unmasked pixels are returned exactly as given.
pub fn inpaint(
    frame: &Frame,
    mask: &SpecularMaskTrad,
    params: &InpaintParams,
) -> Result<InpaintedFrame> {
    let (h, w, _) = frame.pixels.dim();
    if mask.mask.dim() != (h, w) {
        return Err(ShadesError::InvalidInput(format!(
            "mask shape {:?} does not match frame {:?}",
            mask.mask.dim(),
            (h, w)
        )));
    }
    let masked: Vec<(usize, usize)> = ndarray::indices((h, w))
        .into_iter()
        .filter(|&(i, j)| mask.mask[[i, j]] > 0.5)
        .collect();
    if masked.len() == h * w {
        return Err(ShadesError::DegenerateMask);
    }
    let mut pixels = frame.pixels.clone();
    if masked.is_empty() {
        return Ok(InpaintedFrame {
            pixels,
            source_mask: mask.clone(),
        });
    }

    // seed masked pixels with the unmasked mean for faster convergence
    let mut seed = [0.0; 3];
    let mut count = 0.0;
    for i in 0..h {
        for j in 0..w {
            if mask.mask[[i, j]] < 0.5 {
                for (c, s) in seed.iter_mut().enumerate() {
                    *s += pixels[[i, j, c]];
                }
                count += 1.0;
            }
        }
    }
    for (i, j) in &masked {
        for c in 0..3 {
            pixels[[*i, *j, c]] = seed[c] / count;
        }
    }

    // Jacobi iteration of the discrete Laplace equation on the masked set;
    // off-image neighbours are ignored (natural boundary)
    let mut next = pixels.clone();
    for _ in 0..params.max_iters {
        let mut max_change = 0.0f64;
        for &(i, j) in &masked {
            for c in 0..3 {
                let mut acc = 0.0;
                let mut n = 0.0;
                if i > 0 {
                    acc += pixels[[i - 1, j, c]];
                    n += 1.0;
                }
                if i + 1 < h {
                    acc += pixels[[i + 1, j, c]];
                    n += 1.0;
                }
                if j > 0 {
                    acc += pixels[[i, j - 1, c]];
                    n += 1.0;
                }
                if j + 1 < w {
                    acc += pixels[[i, j + 1, c]];
                    n += 1.0;
                }
                let v = acc / n;
                max_change = max_change.max((v - pixels[[i, j, c]]).abs());
                next[[i, j, c]] = v;
            }
        }
        for &(i, j) in &masked {
            for c in 0..3 {
                pixels[[i, j, c]] = next[[i, j, c]];
            }
        }
        if max_change < params.tol {
            break;
        }
    }
    Ok(InpaintedFrame {
        pixels,
        source_mask: mask.clone(),
    })
}

/// Segmentation followed by inpainting: the training prior for one frame.
pub fn compute_i_rem(
    frame: &Frame,
    seg: &SegmentParams,
    inp: &InpaintParams,
) -> Result<(InpaintedFrame, SpecularMaskTrad)> {
    let mask = segment_specular(frame, seg);
    let filled = inpaint(frame, &mask, inp)?;
    Ok((filled, mask))
}

/// Disk cache of priors, one `_rem/` (16-bit PNG) and one `_mask/`
/// (`{0,255}` PNG) directory per sequence. Writes are atomic.
pub struct PriorCache {
    rem_dir: PathBuf,
    mask_dir: PathBuf,
}

impl PriorCache {
    /// Cache directories sit next to the sequence directory:
    /// `<seq>` -> `<seq>_rem`, `<seq>_mask`.
    pub fn for_sequence_dir(seq_dir: &Path) -> Self {
        let name = seq_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "seq".into());
        let parent = seq_dir.parent().unwrap_or_else(|| Path::new("."));
        Self {
            rem_dir: parent.join(format!("{name}_rem")),
            mask_dir: parent.join(format!("{name}_mask")),
        }
    }

    fn stem(frame: &Frame) -> String {
        format!("{:06}", frame.index)
    }

    pub fn store(&self, frame: &Frame, rem: &InpaintedFrame, mask: &SpecularMaskTrad) -> Result<()> {
        let stem = Self::stem(frame);
        io::save_rgb16(&self.rem_dir.join(format!("{stem}.png")), &rem.pixels)?;
        io::save_mask(&self.mask_dir.join(format!("{stem}.png")), &mask.mask)?;
        Ok(())
    }

    /// Cached prior for a frame, or `PriorCacheMiss`.
    pub fn load(&self, frame: &Frame) -> Result<(Array3<f64>, Array2<f64>)> {
        let stem = Self::stem(frame);
        let rem_path = self.rem_dir.join(format!("{stem}.png"));
        let mask_path = self.mask_dir.join(format!("{stem}.png"));
        if !rem_path.exists() || !mask_path.exists() {
            return Err(ShadesError::PriorCacheMiss {
                seq_id: frame.seq_id.clone(),
                index: frame.index,
            });
        }
        Ok((io::load_rgb(&rem_path)?, io::load_mask(&mask_path)?))
    }
}
