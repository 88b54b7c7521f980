//! Fixture-based oracle checks spanning every module, runnable from the CLI.
//! Each check recomputes a known-answer fixture and compares against the
//! hand-derived expectation.

use ndarray::{Array2, Array3};

use crate::config::Config;
use crate::evaluation::{depth_metrics, median_scale, ssm, SsmConfig};
use crate::inference::derive_spec_mask;
use crate::ingest::{crop_resize, pair_indices, undistort, CameraModel, Frame};
use crate::losses::{
    photometric_loss, smoothness_loss, ssim, total_loss, AutoMask, LossWeights, TotalLossParts,
    SSIM_C1,
};
use crate::networks::{disp_to_depth, pose_vec_to_se3, DisparityMap, PoseVector};
use crate::specular::{inpaint, segment_specular, InpaintParams, SegmentParams, SpecularMaskTrad};
use crate::warp::{warp, DepthMap, PoseSE3};

type CheckResult = std::result::Result<(), String>;

fn ensure(cond: bool, msg: &str) -> CheckResult {
    if cond {
        Ok(())
    } else {
        Err(msg.to_string())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> CheckResult {
    if (a - b).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: {a} vs {b}"))
    }
}

fn check_ingest() -> CheckResult {
    let frame = Frame::new(Array3::from_elem((4, 6, 3), 0.5), "t", 0);
    let out = crop_resize(&frame, 2).map_err(|e| e.to_string())?;
    ensure(out.pixels.dim() == (2, 2, 3), "crop_resize output shape")?;
    ensure(
        out.pixels.iter().all(|&v| (v - 0.5).abs() < 1e-12),
        "constant invariance under resize",
    )?;
    let pairs = pair_indices(3, &[-1, 1]);
    ensure(
        pairs == vec![(0, 1, 1), (1, 0, -1), (1, 2, 1), (2, 1, -1)],
        "pair enumeration",
    )?;
    let cam = CameraModel::from_params(10.0, 10.0, 3.5, 3.5, [0.0; 5]).map_err(|e| e.to_string())?;
    let textured = Frame::new(
        Array3::from_shape_fn((8, 8, 3), |(i, j, c)| {
            ((i * 13 + j * 7 + c) % 11) as f64 / 11.0
        }),
        "t",
        0,
    );
    let und = undistort(&textured, &cam).map_err(|e| e.to_string())?;
    for (a, b) in und.pixels.iter().zip(textured.pixels.iter()) {
        close(*a, *b, 1e-6, "zero-distortion identity")?;
    }
    Ok(())
}

fn check_specular() -> CheckResult {
    let mut px = Array3::from_elem((32, 32, 3), 0.3);
    px.slice_mut(ndarray::s![10..15, 12..17, ..]).fill(1.0);
    let mask = segment_specular(&Frame::new(px, "t", 0), &SegmentParams::default());
    close(mask.mask.sum(), 81.0, 0.0, "planted 5x5 patch dilates to 9x9")?;

    let mut row = Array3::zeros((1, 5, 3));
    for c in 0..3 {
        row[[0, 0, c]] = 0.2;
        row[[0, 4, c]] = 0.6;
    }
    let mut m = Array2::zeros((1, 5));
    for j in 1..4 {
        m[[0, j]] = 1.0;
    }
    let filled = inpaint(
        &Frame::new(row, "t", 0),
        &SpecularMaskTrad { mask: m },
        &InpaintParams {
            tol: 1e-7,
            max_iters: 5000,
        },
    )
    .map_err(|e| e.to_string())?;
    for (j, expect) in [(1, 0.3), (2, 0.4), (3, 0.5)] {
        close(filled.pixels[[0, j, 0]], expect, 1e-3, "1-D harmonic fill")?;
    }
    Ok(())
}

fn check_warp() -> CheckResult {
    let cam = CameraModel::from_params(10.0, 10.0, 5.5, 5.5, [0.0; 5]).map_err(|e| e.to_string())?;
    let frame = Frame::new(
        Array3::from_shape_fn((12, 12, 3), |(i, j, c)| {
            0.5 + 0.3 * ((j as f64 / 5.0 + c as f64).sin() * (i as f64 / 6.0).cos())
        }),
        "s",
        0,
    );
    let depth = DepthMap::new(Array2::from_elem((12, 12), 2.0)).map_err(|e| e.to_string())?;
    let (warped, mu2) = warp(&frame, &depth, &PoseSE3::identity(), &cam).map_err(|e| e.to_string())?;
    for (a, b) in warped.iter().zip(frame.pixels.iter()) {
        close(*a, *b, 1e-5, "identity warp")?;
    }
    ensure(mu2.mask.iter().all(|&v| v == 1.0), "identity warp mu2")?;
    Ok(())
}

fn check_losses() -> CheckResult {
    let x = Array3::from_shape_fn((6, 6, 3), |(i, j, c)| ((i + 2 * j + c) % 7) as f64 / 7.0);
    let zero = photometric_loss(&x, &x, &LossWeights::default()).map_err(|e| e.to_string())?;
    ensure(zero.iter().all(|&v| v == 0.0), "photometric(x,x) == 0")?;

    let a = Array3::from_elem((6, 6, 3), 0.0);
    let b = Array3::from_elem((6, 6, 3), 1.0);
    let s = ssim(&a, &b).map_err(|e| e.to_string())?;
    let expect = SSIM_C1 / (1.0 + SSIM_C1);
    close(s[[3, 3]], expect, 1e-12, "constant-image SSIM closed form")?;

    let d = Array2::from_elem((5, 5), 1.5);
    close(
        smoothness_loss(&d, &Array3::from_elem((5, 5, 3), 0.5), true),
        0.0,
        0.0,
        "constant depth smoothness",
    )?;

    let parts = TotalLossParts {
        l_d_t: 1.0,
        l_d_s: 1.0,
        l_a_map: Array2::ones((4, 4)),
        l_r_map: Array2::ones((4, 4)),
        l_es: 1.0,
    };
    let breakdown = total_loss(&parts, &AutoMask::all_ones(4, 4), &LossWeights::default())
        .map_err(|e| e.to_string())?;
    close(breakdown.total, 1.61, 1e-12, "weighted total on all-ones fixture")?;
    Ok(())
}

fn check_networks() -> CheckResult {
    let depth = disp_to_depth(
        &DisparityMap {
            disp: Array2::from_elem((1, 1), 0.5),
        },
        0.1,
        100.0,
    )
    .map_err(|e| e.to_string())?;
    close(depth.data[[0, 0]], 1.0 / (0.01 + 9.99 * 0.5), 1e-12, "disp_to_depth midpoint")?;

    let pose = pose_vec_to_se3(&PoseVector {
        axis_angle: [0.0, 0.0, std::f64::consts::FRAC_PI_2],
        translation: [0.0; 3],
    });
    let expect = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
    for (row, expect_row) in pose.rotation.iter().zip(expect.iter()) {
        for (got, want) in row.iter().zip(expect_row.iter()) {
            close(*got, *want, 1e-9, "quarter-turn rotation")?;
        }
    }
    Ok(())
}

fn check_evaluation() -> CheckResult {
    let gt = Array2::from_shape_vec((1, 2), vec![2.0, 4.0]).map_err(|e| e.to_string())?;
    let pred = DepthMap::new(Array2::from_shape_vec((1, 2), vec![3.0, 3.0]).unwrap())
        .map_err(|e| e.to_string())?;
    let m = depth_metrics(&pred, &gt, &Array2::ones((1, 2))).map_err(|e| e.to_string())?;
    close(m.mae, 1.0, 1e-9, "MAE fixture")?;
    close(m.rmse, 1.0, 1e-9, "RMSE fixture")?;
    close(m.abs_rel, 0.375, 1e-9, "AbsRel fixture")?;
    close(m.sq_rel, 0.375, 1e-9, "SqRel fixture")?;

    let gt2 = Array2::from_shape_vec((1, 3), vec![10.0, 40.0, 90.0]).unwrap();
    let scaled = median_scale(
        &DepthMap::new(Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap()).unwrap(),
        &gt2,
        &Array2::ones((1, 3)),
    )
    .map_err(|e| e.to_string())?;
    ensure(
        scaled.data.as_slice().unwrap() == [20.0, 40.0, 60.0],
        "median scaling arithmetic",
    )?;

    let mut depth = Array2::from_elem((40, 40), 2.0);
    let mut mask = Array2::zeros((40, 40));
    for i in 5..9 {
        for j in 5..9 {
            mask[[i, j]] = 1.0;
        }
    }
    for i in 25..29 {
        for j in 25..29 {
            mask[[i, j]] = 1.0;
            depth[[i, j]] = 4.0;
        }
    }
    let s = ssm(&depth, &mask, &SsmConfig::default()).map_err(|e| e.to_string())?;
    close(s, 50.0, 0.0, "half-smooth SSM")?;
    Ok(())
}

fn check_inference() -> CheckResult {
    let frame = Array3::from_elem((2, 2, 3), 1.0);
    let recon = Array3::from_elem((2, 2, 3), 0.7);
    let mask = derive_spec_mask(&frame, &recon, 50.0);
    ensure(mask.iter().all(|&v| v == 1.0), "residual 0.3 above threshold 50")?;
    let frame = Array3::from_elem((2, 2, 3), 0.75);
    let recon = Array3::from_elem((2, 2, 3), 0.6);
    let mask = derive_spec_mask(&frame, &recon, 50.0);
    ensure(mask.iter().all(|&v| v == 0.0), "residual 0.15 below threshold 50")?;
    Ok(())
}

fn check_config() -> CheckResult {
    let cfg = Config::default();
    let text = cfg.to_key_value_string();
    let back = Config::from_str_contents(&text).map_err(|e| e.to_string())?;
    ensure(back == cfg, "config snapshot round trip")
}

/// Run every check; returns (name, outcome) pairs.
pub fn run_all() -> Vec<(&'static str, CheckResult)> {
    vec![
        ("ingest", check_ingest()),
        ("specular_prior", check_specular()),
        ("view_synthesis", check_warp()),
        ("losses", check_losses()),
        ("networks", check_networks()),
        ("evaluation", check_evaluation()),
        ("inference", check_inference()),
        ("config", check_config()),
    ]
}
