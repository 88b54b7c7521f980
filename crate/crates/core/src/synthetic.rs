//! Synthetic test scene: a textured fronto-parallel plane with a smooth bump,
//! rendered from two known viewpoints by ray-marching the heightfield, with
//! optional planted specular blobs. Every quantity (depth per view, relative
//! pose, clean shading/albedo product, blob masks) is known exactly, which
//! makes the scene the ground truth for end-to-end training checks.

use ndarray::{Array2, Array3};

use crate::ingest::{CameraModel, Frame};
use crate::networks::{pose_vec_to_se3, PoseVector};
use crate::warp::PoseSE3;

/// Scene layout and rendering controls.
#[derive(Debug, Clone)]
pub struct SceneParams {
    /// Square image size in pixels.
    pub size: usize,
    /// Depth of the background plane in the target view.
    pub plane_depth: f64,
    /// How much closer the bump apex sits than the plane.
    pub bump_height: f64,
    /// Bump centre in target-camera x/y at plane depth (scene units).
    pub bump_center: (f64, f64),
    /// Gaussian radius of the bump (scene units).
    pub bump_sigma: f64,
    /// Relative pose target -> source as axis-angle + translation.
    pub pose_axis_angle: [f64; 3],
    pub pose_translation: [f64; 3],
    /// Specular blob discs per view: (centre column, centre row, radius).
    pub blobs: Vec<Vec<(f64, f64, f64)>>,
    /// Peak value written inside a blob.
    pub blob_value: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            size: 48,
            plane_depth: 3.0,
            bump_height: 1.2,
            bump_center: (0.0, 0.0),
            bump_sigma: 0.55,
            pose_axis_angle: [0.0, 0.0, 0.0],
            pose_translation: [0.22, 0.03, 0.0],
            blobs: vec![
                vec![(12.0, 14.0, 3.0), (34.0, 30.0, 2.5)],
                vec![(14.5, 13.0, 3.0), (36.0, 31.5, 2.5)],
            ],
            blob_value: 0.97,
        }
    }
}

/// A fully known two-view scene.
#[derive(Debug, Clone)]
pub struct ToyScene {
    /// The two rendered frames (with blobs), target first.
    pub frames: Vec<Frame>,
    /// The blob-free shading/albedo product per view.
    pub clean: Vec<Array3<f64>>,
    /// Exact per-view depth.
    pub gt_depth: Vec<Array2<f64>>,
    /// Planted blob masks per view.
    pub spec_masks: Vec<Array2<f64>>,
    /// Exact relative pose, target -> source.
    pub pose_t_to_s: PoseSE3,
    pub cam: CameraModel,
}

/// Surface height (camera z in the target frame) over target x/y.
fn surface_z(p: &SceneParams, x: f64, y: f64) -> f64 {
    let dx = x - p.bump_center.0;
    let dy = y - p.bump_center.1;
    p.plane_depth - p.bump_height * (-(dx * dx + dy * dy) / (2.0 * p.bump_sigma * p.bump_sigma)).exp()
}

/// View-independent surface colour: smooth multi-sine albedo times a gentle
/// shading field, kept dark enough that planted blobs dominate the residual.
fn surface_color(x: f64, y: f64, c: usize) -> f64 {
    let phase = c as f64 * 1.3;
    let albedo = 0.33
        + 0.16 * ((2.4 * x + phase).sin() * (1.9 * y - 0.4 * phase).cos())
        + 0.07 * ((5.3 * x - 1.1 * y + 0.5 * phase).sin());
    let shading = 0.86 + 0.10 * ((0.9 * x).cos() * (0.7 * y).sin());
    (albedo * shading).clamp(0.02, 0.98)
}

/// Render one view by ray-marching the heightfield. `pose` maps target
/// coordinates into this view's coordinates.
fn render_view(
    p: &SceneParams,
    cam: &CameraModel,
    view_from_target: &PoseSE3,
) -> (Array3<f64>, Array2<f64>) {
    let n = p.size;
    let target_from_view = view_from_target.inverse();
    let ki = cam.k_inv();
    let mut img = Array3::zeros((n, n, 3));
    let mut depth = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let d = [
                ki[0][0] * j as f64 + ki[0][1] * i as f64 + ki[0][2],
                ki[1][0] * j as f64 + ki[1][1] * i as f64 + ki[1][2],
                1.0,
            ];
            // X_target(lambda) = R^T (lambda d) + t', solve z = f(x, y)
            let rd = [
                target_from_view.rotation[0][0] * d[0]
                    + target_from_view.rotation[0][1] * d[1]
                    + target_from_view.rotation[0][2],
                target_from_view.rotation[1][0] * d[0]
                    + target_from_view.rotation[1][1] * d[1]
                    + target_from_view.rotation[1][2],
                target_from_view.rotation[2][0] * d[0]
                    + target_from_view.rotation[2][1] * d[1]
                    + target_from_view.rotation[2][2],
            ];
            let t = target_from_view.translation;
            let mut lambda = p.plane_depth;
            for _ in 0..80 {
                let x = lambda * rd[0] + t[0];
                let y = lambda * rd[1] + t[1];
                let z_surface = surface_z(p, x, y);
                let next = (z_surface - t[2]) / rd[2];
                if (next - lambda).abs() < 1e-12 {
                    lambda = next;
                    break;
                }
                lambda = next;
            }
            let x = lambda * rd[0] + t[0];
            let y = lambda * rd[1] + t[1];
            depth[[i, j]] = lambda; // rays are z-normalized, so z = lambda
            for c in 0..3 {
                img[[i, j, c]] = surface_color(x, y, c);
            }
        }
    }
    (img, depth)
}

/// Render the two-view scene with planted blobs.
pub fn render_scene(p: &SceneParams) -> ToyScene {
    let n = p.size;
    let f = 0.9 * n as f64;
    let c = (n as f64 - 1.0) / 2.0;
    let cam = CameraModel::from_params(f, f, c, c, [0.0; 5]).expect("valid synthetic camera");
    let pose = pose_vec_to_se3(&PoseVector {
        axis_angle: p.pose_axis_angle,
        translation: p.pose_translation,
    });

    let mut frames = Vec::new();
    let mut clean = Vec::new();
    let mut gt_depth = Vec::new();
    let mut spec_masks = Vec::new();
    for (view, view_from_target) in [PoseSE3::identity(), pose.clone()].iter().enumerate() {
        let (img, depth) = render_view(p, &cam, view_from_target);
        let mut lit = img.clone();
        let mut mask = Array2::zeros((n, n));
        for &(bx, by, r) in p.blobs.get(view).into_iter().flatten() {
            for i in 0..n {
                for j in 0..n {
                    let d2 = (j as f64 - bx).powi(2) + (i as f64 - by).powi(2);
                    if d2 <= r * r {
                        mask[[i, j]] = 1.0;
                        for ch in 0..3 {
                            // additive specular component raises to blob_value
                            lit[[i, j, ch]] = p.blob_value;
                        }
                    }
                }
            }
        }
        frames.push(Frame::new(lit, "toy", view));
        clean.push(img);
        gt_depth.push(depth);
        spec_masks.push(mask);
    }
    ToyScene {
        frames,
        clean,
        gt_depth,
        spec_masks,
        pose_t_to_s: pose,
        cam,
    }
}
