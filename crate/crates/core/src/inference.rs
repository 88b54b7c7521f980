//! Single-frame prediction: depth, albedo, shading, the reconstructed
//! specular-free image `A * S`, the thresholded specular mask, and optionally
//! the relative pose when a second frame is supplied.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Result, ShadesError};
use crate::ingest::Frame;
use crate::io;
use crate::networks::{
    decompose_forward, depth_forward, disp_to_depth, pose_forward, pose_vec_to_se3,
    CheckpointMeta, ParamStore,
};
use crate::warp::{DepthMap, PoseSE3};

/// All single-frame outputs.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub depth: DepthMap,
    pub albedo: Array3<f64>,
    pub shading: Array2<f64>,
    pub recon_as: Array3<f64>,
    pub spec_mask: Array2<f64>,
    pub pose: Option<PoseSE3>,
}

/// Binarize the residual `frame - recon_as`: a pixel is specular when its
/// largest channel residual exceeds `threshold` (given on the 0..255 scale).
/// Negative residuals never flag, matching the additive specular model.
pub fn derive_spec_mask(
    frame: &Array3<f64>,
    recon_as: &Array3<f64>,
    threshold: f64,
) -> Array2<f64> {
    let (h, w, _) = frame.dim();
    let t = threshold / 255.0;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let max_resid = (0..3)
            .map(|c| frame[[i, j, c]] - recon_as[[i, j, c]])
            .fold(f64::NEG_INFINITY, f64::max);
        f64::from(max_resid > t)
    })
}

/// Run every head on one frame. `second_frame` enables the pose output.
pub fn infer(
    frame: &Frame,
    store: &ParamStore,
    meta: &CheckpointMeta,
    second_frame: Option<&Frame>,
    spec_threshold: f64,
) -> Result<InferenceResult> {
    if frame.height() != meta.net.input_size || frame.width() != meta.net.input_size {
        return Err(ShadesError::InvalidInput(format!(
            "frame is {}x{}, checkpoint was trained at {}",
            frame.height(),
            frame.width(),
            meta.net.input_size
        )));
    }
    let decomp = decompose_forward(frame, store, &meta.net)?;
    let recon_as = decomp.reconstruction();
    let disp = depth_forward(frame, store, &meta.net)?;
    let depth = disp_to_depth(&disp, meta.net.d_min, meta.net.d_max)?;
    let spec_mask = derive_spec_mask(&frame.pixels, &recon_as, spec_threshold);
    let pose = match second_frame {
        Some(second) => {
            let v = pose_forward(frame, second, store, &meta.net)?;
            Some(pose_vec_to_se3(&v))
        }
        None => None,
    };
    Ok(InferenceResult {
        depth,
        albedo: decomp.albedo,
        shading: decomp.shading,
        recon_as,
        spec_mask,
        pose,
    })
}

/// Write one frame's outputs: 8-bit PNGs for images, `{0,255}` PNG for the
/// mask, 16-bit PNG plus range sidecar for depth. Files share the `stem`
/// prefix so downstream tools can match them up.
pub fn write_outputs(out_dir: &Path, stem: &str, frame: &Frame, result: &InferenceResult) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    io::save_rgb8(&out_dir.join(format!("{stem}_input.png")), &frame.pixels)?;
    io::save_rgb8(&out_dir.join(format!("{stem}_albedo.png")), &result.albedo)?;
    let (h, w) = result.shading.dim();
    let shading_rgb = Array3::from_shape_fn((h, w, 3), |(i, j, _)| result.shading[[i, j]]);
    io::save_rgb8(&out_dir.join(format!("{stem}_shading.png")), &shading_rgb)?;
    io::save_rgb8(&out_dir.join(format!("{stem}_as.png")), &result.recon_as)?;
    io::save_mask(&out_dir.join(format!("{stem}_mask.png")), &result.spec_mask)?;
    io::save_depth(&out_dir.join(format!("{stem}_depth.png")), &result.depth.data)?;
    Ok(())
}
