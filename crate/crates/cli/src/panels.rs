//! Figure-grade panel export: one horizontal strip per frame showing
//! input | albedo | shading | depth | specular mask. Depth is normalized to
//! [0, 1], clipped at 0.8, and rendered with a perceptually uniform
//! colormap.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{Array2, Array3};
use shades_core::io;

/// Normalized-depth clip point used for rendering.
pub const DEPTH_CLIP: f64 = 0.8;

// viridis anchors, dark-to-bright
const VIRIDIS: [[f64; 3]; 16] = [
    [0.267004, 0.004874, 0.329415],
    [0.282623, 0.140926, 0.457517],
    [0.253935, 0.265254, 0.529983],
    [0.206756, 0.371758, 0.553117],
    [0.163625, 0.471133, 0.558148],
    [0.127568, 0.566949, 0.550556],
    [0.134692, 0.658636, 0.517649],
    [0.266941, 0.748751, 0.440573],
    [0.477504, 0.821444, 0.318195],
    [0.741388, 0.873449, 0.149561],
    [0.993248, 0.906157, 0.143936],
    [0.964894, 0.843848, 0.273391],
    [0.964894, 0.843848, 0.273391],
    [0.964894, 0.843848, 0.273391],
    [0.964894, 0.843848, 0.273391],
    [0.964894, 0.843848, 0.273391],
];

/// Map t in [0, 1] onto the colormap (first 11 anchors span the ramp).
pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let scaled = t * 10.0;
    let k = (scaled.floor() as usize).min(9);
    let frac = scaled - k as f64;
    let (a, b) = (VIRIDIS[k], VIRIDIS[k + 1]);
    [
        a[0] + frac * (b[0] - a[0]),
        a[1] + frac * (b[1] - a[1]),
        a[2] + frac * (b[2] - a[2]),
    ]
}

/// Depth map to a colormapped tile: min-max normalize, clip at
/// [`DEPTH_CLIP`], rescale the clipped range onto the full ramp.
pub fn depth_tile(depth: &Array2<f64>, valid: &Array2<f64>) -> Array3<f64> {
    let (h, w) = depth.dim();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (d, v) in depth.iter().zip(valid.iter()) {
        if *v > 0.5 {
            lo = lo.min(*d);
            hi = hi.max(*d);
        }
    }
    let span = (hi - lo).max(1e-12);
    Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
        if valid[[i, j]] < 0.5 {
            return 0.0;
        }
        let norm = (depth[[i, j]] - lo) / span;
        let clipped = norm.min(DEPTH_CLIP) / DEPTH_CLIP;
        colormap(clipped)[c]
    })
}

/// Frames available in an inference results directory, identified by the
/// `<stem>_input.png` files.
pub fn result_stems(results_dir: &Path) -> Result<Vec<String>> {
    let mut stems: Vec<String> = std::fs::read_dir(results_dir)
        .with_context(|| format!("reading results dir {}", results_dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix("_input.png").map(String::from)
        })
        .collect();
    stems.sort();
    Ok(stems)
}

/// Compose the five-tile panel for one frame stem.
pub fn export_panel(results_dir: &Path, out_dir: &Path, stem: &str) -> Result<PathBuf> {
    let load = |suffix: &str| -> Result<Array3<f64>> {
        let path = results_dir.join(format!("{stem}_{suffix}.png"));
        if !path.exists() {
            bail!("missing artifact: {}", path.display());
        }
        Ok(io::load_rgb(&path)?)
    };
    let input = load("input")?;
    let albedo = load("albedo")?;
    let shading = load("shading")?;
    let mask = load("mask")?;
    let depth_path = results_dir.join(format!("{stem}_depth.png"));
    if !depth_path.exists() {
        bail!("missing artifact: {}", depth_path.display());
    }
    let (depth, valid) = io::load_depth(&depth_path)?;
    let depth_rgb = depth_tile(&depth, &valid);

    let (h, w, _) = input.dim();
    for tile in [&albedo, &shading, &mask, &depth_rgb] {
        if tile.dim() != (h, w, 3) {
            bail!("inconsistent tile sizes for stem {stem}");
        }
    }
    let tiles = [&input, &albedo, &shading, &depth_rgb, &mask];
    let mut panel = Array3::zeros((h, w * tiles.len(), 3));
    for (k, tile) in tiles.iter().enumerate() {
        panel
            .slice_mut(ndarray::s![.., k * w..(k + 1) * w, ..])
            .assign(tile);
    }
    std::fs::create_dir_all(out_dir)?;
    let out_path = out_dir.join(format!("{stem}_panel.png"));
    io::save_rgb8(&out_path, &panel)?;
    Ok(out_path)
}
