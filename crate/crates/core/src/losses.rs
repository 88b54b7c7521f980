//! Training objectives: windowed SSIM, the photometric consistency form
//! shared by the reconstruction and decomposition losses, the albedo
//! consistency term, edge-aware depth smoothness, the two auto-masks, and the
//! weighted total.
//!
//! Each objective exists twice: a tape-level builder used during training and
//! by gradient checks, and a plain-array wrapper that runs the same tape code
//! and returns values. Masks are always plain data - no gradient flows
//! through a mask decision.

use ndarray::{Array2, Array3};

use crate::error::{Result, ShadesError};
use crate::tape::{Tape, VarId};
use crate::util::hwc_to_chw;

/// SSIM stabilizers on the [0, 1] intensity scale.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Loss weighting. `alpha` blends SSIM against L1 inside the photometric
/// form; the lambdas weight the four terms of the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda_d: f64,
    pub lambda_a: f64,
    pub lambda_r: f64,
    pub lambda_es: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            lambda_d: 0.2,
            lambda_a: 0.2,
            lambda_r: 1.0,
            lambda_es: 0.01,
        }
    }
}

/// The two auto-masks and their product.
#[derive(Debug, Clone)]
pub struct AutoMask {
    pub mu1: Array2<f64>,
    pub mu2: Array2<f64>,
    pub mu: Array2<f64>,
}

impl AutoMask {
    pub fn new(mu1: Array2<f64>, mu2: Array2<f64>) -> Self {
        let mu = &mu1 * &mu2;
        Self { mu1, mu2, mu }
    }

    /// Mask that keeps every pixel.
    pub fn all_ones(h: usize, w: usize) -> Self {
        Self::new(Array2::ones((h, w)), Array2::ones((h, w)))
    }

    pub fn coverage(&self) -> f64 {
        self.mu.sum() / self.mu.len() as f64
    }
}

/// Scalar components of one total-loss evaluation.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_d_t: f64,
    pub l_d_s: f64,
    pub l_a: f64,
    pub l_r: f64,
    pub l_es: f64,
    pub per_pixel_r: Array2<f64>,
    /// Set when the combined mask had zero coverage and the masked terms
    /// were therefore dropped.
    pub mask_empty: bool,
}

fn check_same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(ShadesError::InvalidInput(format!(
            "shape mismatch: {a:?} vs {b:?}"
        )));
    }
    Ok(())
}

// ---- tape-level builders ----

/// Per-pixel SSIM map over 3x3 mean-pooled statistics, averaged over
/// channels: `[C,H,W] x [C,H,W] -> [H,W]`, range [-1, 1].
pub fn ssim_map_vars(tape: &mut Tape, x: VarId, y: VarId) -> VarId {
    let mu_x = tape.mean_pool3_reflect(x);
    let mu_y = tape.mean_pool3_reflect(y);
    let xx = tape.mul(x, x);
    let yy = tape.mul(y, y);
    let xy = tape.mul(x, y);
    let e_xx = tape.mean_pool3_reflect(xx);
    let e_yy = tape.mean_pool3_reflect(yy);
    let e_xy = tape.mean_pool3_reflect(xy);
    let mu_xx = tape.mul(mu_x, mu_x);
    let mu_yy = tape.mul(mu_y, mu_y);
    let mu_xy = tape.mul(mu_x, mu_y);
    let var_x = tape.sub(e_xx, mu_xx);
    let var_y = tape.sub(e_yy, mu_yy);
    let cov = tape.sub(e_xy, mu_xy);

    let n1 = tape.scale(mu_xy, 2.0);
    let n1 = tape.add_const(n1, SSIM_C1);
    let n2 = tape.scale(cov, 2.0);
    let n2 = tape.add_const(n2, SSIM_C2);
    let numer = tape.mul(n1, n2);

    let d1 = tape.add(mu_xx, mu_yy);
    let d1 = tape.add_const(d1, SSIM_C1);
    let d2 = tape.add(var_x, var_y);
    let d2 = tape.add_const(d2, SSIM_C2);
    let denom = tape.mul(d1, d2);

    let per_channel = tape.div(numer, denom);
    tape.mean_channels(per_channel)
}

/// The shared photometric form: `alpha (1 - SSIM)/2 + (1 - alpha) |a - b|_1`
/// with the L1 averaged over channels. `[C,H,W] x [C,H,W] -> [H,W]`.
pub fn photometric_map_vars(tape: &mut Tape, a: VarId, b: VarId, alpha: f64) -> VarId {
    let diff = tape.sub(a, b);
    let l1c = tape.abs(diff);
    let l1 = tape.mean_channels(l1c);
    let l1_term = tape.scale(l1, 1.0 - alpha);
    if alpha == 0.0 {
        return l1_term;
    }
    let ssim = ssim_map_vars(tape, a, b);
    let neg = tape.neg(ssim);
    let one_minus = tape.add_const(neg, 1.0);
    let ssim_term = tape.scale(one_minus, alpha / 2.0);
    tape.add(ssim_term, l1_term)
}

/// Decomposition objective: photometric distance between the reconstruction
/// `albedo * shading` and the inpainted frame, averaged over pixels.
/// `albedo: [3,H,W]`, `shading: [1,H,W]`.
pub fn decomposition_loss_vars(
    tape: &mut Tape,
    albedo: VarId,
    shading: VarId,
    i_rem: VarId,
    alpha: f64,
) -> VarId {
    let s3 = tape.repeat_channel(shading, 3);
    let recon = tape.mul(albedo, s3);
    let map = photometric_map_vars(tape, recon, i_rem, alpha);
    tape.mean(map)
}

/// Albedo consistency map: channel-mean L1 between the target albedo and the
/// warped source albedo. `[3,H,W] x [3,H,W] -> [H,W]`.
pub fn albedo_loss_map_vars(tape: &mut Tape, a_t: VarId, a_s_warped: VarId) -> VarId {
    let diff = tape.sub(a_t, a_s_warped);
    let l1 = tape.abs(diff);
    tape.mean_channels(l1)
}

/// Edge-aware smoothness: `mean |dx d| e^{-|dx I|} + mean |dy d| e^{-|dy I|}`
/// with forward differences; `normalize` divides depth by its mean first.
/// `depth: [H,W]`, `image: [3,H,W]`.
pub fn smoothness_loss_vars(
    tape: &mut Tape,
    depth: VarId,
    image: VarId,
    normalize: bool,
) -> VarId {
    let d = if normalize {
        let m = tape.mean(depth);
        let m = tape.add_const(m, 1e-7);
        tape.div(depth, m)
    } else {
        depth
    };
    let mut term = |along_x: bool| {
        let dd = if along_x { tape.diff_x(d) } else { tape.diff_y(d) };
        let dd = tape.abs(dd);
        let di = if along_x {
            tape.diff_x(image)
        } else {
            tape.diff_y(image)
        };
        let di = tape.abs(di);
        let di = tape.mean_channels(di);
        let ndi = tape.neg(di);
        let wgt = tape.exp(ndi);
        let prod = tape.mul(dd, wgt);
        tape.mean(prod)
    };
    let tx = term(true);
    let ty = term(false);
    tape.add(tx, ty)
}

/// Mean of `map` restricted to a constant binary mask; zero when the mask is
/// empty. Normalizes by mask cardinality, not map size.
pub fn masked_mean_vars(tape: &mut Tape, map: VarId, mask: &Array2<f64>) -> VarId {
    let count = mask.sum();
    let mask_leaf = tape.leaf(mask.clone().into_dyn());
    let masked = tape.mul(map, mask_leaf);
    let total = tape.sum(masked);
    tape.scale(total, 1.0 / count.max(1.0))
}

/// Tape handles of the parts entering the weighted total.
pub struct TotalLossVars {
    pub l_d_t: VarId,
    pub l_d_s: VarId,
    pub l_a_map: VarId,
    pub l_r_map: VarId,
    pub l_es: VarId,
}

/// Weighted total on tape. The decomposition terms stay unmasked; the albedo
/// and reconstruction maps are mask-averaged; masked terms vanish when the
/// mask is empty.
pub fn total_loss_vars(
    tape: &mut Tape,
    parts: &TotalLossVars,
    mask: &AutoMask,
    weights: &LossWeights,
) -> (VarId, VarId, VarId) {
    let mask_empty = mask.mu.sum() == 0.0;
    let l_a = masked_mean_vars(tape, parts.l_a_map, &mask.mu);
    let l_r = masked_mean_vars(tape, parts.l_r_map, &mask.mu);
    let (l_a, l_r) = if mask_empty {
        (tape.scale(l_a, 0.0), tape.scale(l_r, 0.0))
    } else {
        (l_a, l_r)
    };
    let d_sum = tape.add(parts.l_d_t, parts.l_d_s);
    let d_term = tape.scale(d_sum, weights.lambda_d);
    let a_term = tape.scale(l_a, weights.lambda_a);
    let r_term = tape.scale(l_r, weights.lambda_r);
    let es_term = tape.scale(parts.l_es, weights.lambda_es);
    let da = tape.add(d_term, a_term);
    let dar = tape.add(da, r_term);
    let total = tape.add(dar, es_term);
    (total, l_a, l_r)
}

// ---- plain-array wrappers ----

fn image_pair_leaves(
    tape: &mut Tape,
    a: &Array3<f64>,
    b: &Array3<f64>,
) -> Result<(VarId, VarId)> {
    check_same_shape(&[a.dim().0, a.dim().1, a.dim().2], &[b.dim().0, b.dim().1, b.dim().2])?;
    if a.dim().0 < 2 || a.dim().1 < 2 {
        return Err(ShadesError::InvalidInput(
            "images must be at least 2x2".into(),
        ));
    }
    let av = tape.leaf(hwc_to_chw(a));
    let bv = tape.leaf(hwc_to_chw(b));
    Ok((av, bv))
}

fn to_map(tape: &Tape, id: VarId) -> Array2<f64> {
    let v = tape.value(id);
    Array2::from_shape_fn((v.shape()[0], v.shape()[1]), |(i, j)| v[[i, j]])
}

/// Windowed SSIM similarity map of two `[H,W,3]` images.
pub fn ssim(x: &Array3<f64>, y: &Array3<f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let (xv, yv) = image_pair_leaves(&mut tape, x, y)?;
    let map = ssim_map_vars(&mut tape, xv, yv);
    Ok(to_map(&tape, map))
}

/// Per-pixel photometric distance of two `[H,W,3]` images.
pub fn photometric_loss(
    a: &Array3<f64>,
    b: &Array3<f64>,
    weights: &LossWeights,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let (av, bv) = image_pair_leaves(&mut tape, a, b)?;
    let map = photometric_map_vars(&mut tape, av, bv, weights.alpha);
    Ok(to_map(&tape, map))
}

/// Scalar decomposition loss: photometric distance of `albedo * shading`
/// against the inpainted image, averaged over pixels.
/// `albedo, i_rem: [H,W,3]`, `shading: [H,W]`.
pub fn decomposition_loss(
    albedo: &Array3<f64>,
    shading: &Array2<f64>,
    i_rem: &Array3<f64>,
    weights: &LossWeights,
) -> Result<f64> {
    if albedo.dim().0 != shading.dim().0 || albedo.dim().1 != shading.dim().1 {
        return Err(ShadesError::InvalidInput(
            "albedo and shading shapes differ".into(),
        ));
    }
    if albedo.iter().any(|&v| v < 0.0) || shading.iter().any(|&v| v < 0.0) {
        return Err(ShadesError::InvalidInput(
            "albedo and shading must be non-negative".into(),
        ));
    }
    let mut tape = Tape::new();
    let (av, iv) = image_pair_leaves(&mut tape, albedo, i_rem)?;
    let (h, w) = shading.dim();
    let sv = tape.leaf(shading.clone().into_shape_with_order((1, h, w)).unwrap().into_dyn());
    let loss = decomposition_loss_vars(&mut tape, av, sv, iv, weights.alpha);
    Ok(tape.scalar_value(loss))
}

/// Per-pixel channel-mean L1 between target albedo and warped source albedo.
pub fn albedo_loss(a_t: &Array3<f64>, a_s_warped: &Array3<f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let (av, bv) = image_pair_leaves(&mut tape, a_t, a_s_warped)?;
    let map = albedo_loss_map_vars(&mut tape, av, bv);
    Ok(to_map(&tape, map))
}

/// Scalar edge-aware smoothness of a depth map against its image.
pub fn smoothness_loss(depth: &Array2<f64>, image: &Array3<f64>, normalize: bool) -> f64 {
    let mut tape = Tape::new();
    let dv = tape.leaf(depth.clone().into_dyn());
    let iv = tape.leaf(hwc_to_chw(image));
    let loss = smoothness_loss_vars(&mut tape, dv, iv, normalize);
    tape.scalar_value(loss)
}

/// Stationary-pixel auto-mask: a pixel survives iff the best warped source
/// explains it strictly better than the best raw source.
pub fn automask_mu1(
    target: &Array3<f64>,
    warped_by_source: &[Array3<f64>],
    raw_sources: &[Array3<f64>],
    weights: &LossWeights,
) -> Result<Array2<f64>> {
    if warped_by_source.is_empty() || raw_sources.is_empty() {
        return Err(ShadesError::InvalidInput("need at least one source".into()));
    }
    let min_map = |imgs: &[Array3<f64>]| -> Result<Array2<f64>> {
        let mut best: Option<Array2<f64>> = None;
        for img in imgs {
            let map = photometric_loss(target, img, weights)?;
            best = Some(match best {
                None => map,
                Some(acc) => {
                    let mut out = acc;
                    ndarray::Zip::from(&mut out).and(&map).for_each(|o, &m| *o = o.min(m));
                    out
                }
            });
        }
        Ok(best.expect("non-empty"))
    };
    let warped = min_map(warped_by_source)?;
    let raw = min_map(raw_sources)?;
    let mut mu1 = Array2::zeros(warped.dim());
    ndarray::Zip::from(&mut mu1)
        .and(&warped)
        .and(&raw)
        .for_each(|m, &w, &r| *m = f64::from(w < r));
    Ok(mu1)
}

/// Plain-array parts entering the weighted total.
pub struct TotalLossParts {
    pub l_d_t: f64,
    pub l_d_s: f64,
    pub l_a_map: Array2<f64>,
    pub l_r_map: Array2<f64>,
    pub l_es: f64,
}

/// Combine loss parts into the weighted total.
pub fn total_loss(
    parts: &TotalLossParts,
    mask: &AutoMask,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    check_same_shape(
        &[parts.l_a_map.dim().0, parts.l_a_map.dim().1],
        &[mask.mu.dim().0, mask.mu.dim().1],
    )?;
    check_same_shape(
        &[parts.l_r_map.dim().0, parts.l_r_map.dim().1],
        &[mask.mu.dim().0, mask.mu.dim().1],
    )?;
    let count = mask.mu.sum();
    let mask_empty = count == 0.0;
    let masked_mean = |map: &Array2<f64>| -> f64 {
        if mask_empty {
            0.0
        } else {
            (map * &mask.mu).sum() / count.max(1.0)
        }
    };
    let l_a = masked_mean(&parts.l_a_map);
    let l_r = masked_mean(&parts.l_r_map);
    let total = weights.lambda_d * (parts.l_d_t + parts.l_d_s)
        + weights.lambda_a * l_a
        + weights.lambda_r * l_r
        + weights.lambda_es * parts.l_es;
    Ok(LossBreakdown {
        total,
        l_d_t: parts.l_d_t,
        l_d_s: parts.l_d_s,
        l_a,
        l_r,
        l_es: parts.l_es,
        per_pixel_r: parts.l_r_map.clone(),
        mask_empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{finite_difference_gradient, gradient_rel_error};
    use ndarray::{Array2, Array3, ArrayD};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_image(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.05..0.95))
    }

    fn const_image(h: usize, w: usize, v: f64) -> Array3<f64> {
        Array3::from_elem((h, w, 3), v)
    }

    /// The constant-image SSIM value: C1 plugs into the closed form,
    /// C2 cancels because both variances vanish.
    fn ssim_of_constants(a: f64, b: f64) -> f64 {
        (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1)
    }

    #[test]
    fn ssim_identical_images_is_one() {
        let x = rand_image(8, 8, 1);
        let map = ssim(&x, &x).unwrap();
        for v in map.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_constant_pair_matches_closed_form() {
        let map = ssim(&const_image(6, 6, 0.0), &const_image(6, 6, 1.0)).unwrap();
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        for v in map.iter() {
            assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        }
    }

    #[test]
    fn ssim_matches_windowed_loop_oracle() {
        let x = rand_image(8, 8, 2);
        let y = rand_image(8, 8, 3);
        let got = ssim(&x, &y).unwrap();
        let reflect = |k: i64, n: usize| -> usize {
            let n = n as i64;
            (if k < 0 { -k } else if k >= n { 2 * n - 2 - k } else { k }) as usize
        };
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = 0.0;
                for c in 0..3 {
                    let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            let ii = reflect(i as i64 + di, 8);
                            let jj = reflect(j as i64 + dj, 8);
                            let (xv, yv) = (x[[ii, jj, c]], y[[ii, jj, c]]);
                            mx += xv;
                            my += yv;
                            mxx += xv * xv;
                            myy += yv * yv;
                            mxy += xv * yv;
                        }
                    }
                    mx /= 9.0;
                    my /= 9.0;
                    let vx = mxx / 9.0 - mx * mx;
                    let vy = myy / 9.0 - my * my;
                    let cxy = mxy / 9.0 - mx * my;
                    acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                }
                let expect = acc / 3.0;
                assert!((got[[i, j]] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ssim_rejects_shape_mismatch() {
        assert!(matches!(
            ssim(&const_image(4, 4, 0.5), &const_image(4, 5, 0.5)),
            Err(ShadesError::InvalidInput(_))
        ));
    }

    #[test]
    fn photometric_identical_is_exactly_zero() {
        let x = rand_image(6, 6, 4);
        let map = photometric_loss(&x, &x, &LossWeights::default()).unwrap();
        assert!(map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn photometric_alpha_zero_is_channel_mean_l1() {
        let w = LossWeights {
            alpha: 0.0,
            ..Default::default()
        };
        let map =
            photometric_loss(&const_image(5, 5, 0.2), &const_image(5, 5, 0.5), &w).unwrap();
        for v in map.iter() {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn photometric_alpha_one_constant_pair() {
        let w = LossWeights {
            alpha: 1.0,
            ..Default::default()
        };
        let map =
            photometric_loss(&const_image(5, 5, 0.0), &const_image(5, 5, 1.0), &w).unwrap();
        let expect = (1.0 - SSIM_C1 / (1.0 + SSIM_C1)) / 2.0;
        for v in map.iter() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn photometric_is_never_negative() {
        let map = photometric_loss(&rand_image(8, 8, 5), &rand_image(8, 8, 6), &LossWeights::default())
            .unwrap();
        assert!(map.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn decomposition_exact_product_is_zero() {
        let a = rand_image(6, 6, 7);
        let s = Array2::from_elem((6, 6), 0.8);
        let mut i_rem = a.clone();
        i_rem *= 0.8;
        let l = decomposition_loss(&a, &s, &i_rem, &LossWeights::default()).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn decomposition_identity_shading_is_zero() {
        let a = rand_image(6, 6, 8);
        let s = Array2::ones((6, 6));
        let l = decomposition_loss(&a, &s, &a, &LossWeights::default()).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn decomposition_constants_match_closed_form() {
        // A = 0.5, S = 0.5 -> AS = 0.25 compared against 0.5
        let a = const_image(6, 6, 0.5);
        let s = Array2::from_elem((6, 6), 0.5);
        let i_rem = const_image(6, 6, 0.5);
        let l = decomposition_loss(&a, &s, &i_rem, &LossWeights::default()).unwrap();
        let expect = 0.85 * (1.0 - ssim_of_constants(0.25, 0.5)) / 2.0 + 0.15 * 0.25;
        assert!((l - expect).abs() < 1e-12, "{l} vs {expect}");
    }

    #[test]
    fn albedo_loss_cases() {
        let x = rand_image(5, 5, 9);
        assert!(albedo_loss(&x, &x).unwrap().iter().all(|&v| v == 0.0));
        let map = albedo_loss(&const_image(5, 5, 0.3), &const_image(5, 5, 0.7)).unwrap();
        for v in map.iter() {
            assert!((v - 0.4).abs() < 1e-12);
        }
        // random pair against an elementwise oracle
        let y = rand_image(5, 5, 10);
        let map = albedo_loss(&x, &y).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect: f64 =
                    (0..3).map(|c| (x[[i, j, c]] - y[[i, j, c]]).abs()).sum::<f64>() / 3.0;
                assert!((map[[i, j]] - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn smoothness_constant_depth_is_zero() {
        let d = Array2::from_elem((6, 6), 2.5);
        let img = rand_image(6, 6, 11);
        assert_eq!(smoothness_loss(&d, &img, true), 0.0);
    }

    #[test]
    fn smoothness_ramp_matches_closed_form() {
        // depth = 1 + 0.1 j on a constant image: weights are e^0 = 1 and the
        // x-term is the normalized slope, the y-term 0
        let (h, w) = (6, 8);
        let slope = 0.1;
        let d = Array2::from_shape_fn((h, w), |(_, j)| 1.0 + slope * j as f64);
        let img = const_image(h, w, 0.5);
        let mean = d.sum() / d.len() as f64;
        let expect = slope / (mean + 1e-7);
        let got = smoothness_loss(&d, &img, true);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        // unnormalized variant uses the raw slope
        let got_raw = smoothness_loss(&d, &img, false);
        assert!((got_raw - slope).abs() < 1e-12);
    }

    #[test]
    fn smoothness_is_cheaper_on_image_edges() {
        let (h, w) = (6, 6);
        let d = Array2::from_shape_fn((h, w), |(_, j)| if j < 3 { 1.0 } else { 2.0 });
        let flat = const_image(h, w, 0.5);
        let mut edged = flat.clone();
        // strong image edge aligned with the depth edge
        for i in 0..h {
            for c in 0..3 {
                edged[[i, 3, c]] = 1.0;
                for j in 0..3 {
                    edged[[i, j, c]] = 0.0;
                }
            }
        }
        let on_flat = smoothness_loss(&d, &flat, true);
        let on_edge = smoothness_loss(&d, &edged, true);
        assert!(on_edge < on_flat);
    }

    #[test]
    fn automask_mu1_trivial_cases() {
        let target = rand_image(4, 4, 12);
        let raw = rand_image(4, 4, 13);
        let w = LossWeights::default();
        // perfect warp, imperfect raw -> all ones
        let mu1 = automask_mu1(&target, std::slice::from_ref(&target), std::slice::from_ref(&raw), &w).unwrap();
        assert!(mu1.iter().all(|&v| v == 1.0));
        // static scene: raw equals target, warp does not -> all zeros
        let mu1 = automask_mu1(&target, std::slice::from_ref(&raw), std::slice::from_ref(&target), &w).unwrap();
        assert!(mu1.iter().all(|&v| v == 0.0));
        assert!(automask_mu1(&target, &[], &[raw], &w).is_err());
    }

    #[test]
    fn automask_mu1_matches_per_pixel_oracle() {
        let target = rand_image(4, 4, 14);
        let warped = rand_image(4, 4, 15);
        let raw = rand_image(4, 4, 16);
        let w = LossWeights::default();
        let mu1 = automask_mu1(&target, std::slice::from_ref(&warped), std::slice::from_ref(&raw), &w).unwrap();
        let pw = photometric_loss(&target, &warped, &w).unwrap();
        let pr = photometric_loss(&target, &raw, &w).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = f64::from(pw[[i, j]] < pr[[i, j]]);
                assert_eq!(mu1[[i, j]], expect);
            }
        }
    }

    #[test]
    fn automask_mu1_takes_min_over_sources() {
        let target = rand_image(4, 4, 17);
        let w1 = rand_image(4, 4, 18);
        let w2 = target.clone(); // second source warps perfectly
        let raw = rand_image(4, 4, 19);
        let w = LossWeights::default();
        let mu1 = automask_mu1(&target, &[w1, w2], &[raw.clone(), raw], &w).unwrap();
        assert!(mu1.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn total_loss_arithmetic() {
        let zeros = TotalLossParts {
            l_d_t: 0.0,
            l_d_s: 0.0,
            l_a_map: Array2::zeros((4, 4)),
            l_r_map: Array2::zeros((4, 4)),
            l_es: 0.0,
        };
        let mask = AutoMask::all_ones(4, 4);
        let w = LossWeights::default();
        assert_eq!(total_loss(&zeros, &mask, &w).unwrap().total, 0.0);

        let only_es = TotalLossParts {
            l_es: 2.0,
            ..zeros_clone(&zeros)
        };
        let b = total_loss(&only_es, &mask, &w).unwrap();
        assert!((b.total - 0.02).abs() < 1e-15);

        let all_ones = TotalLossParts {
            l_d_t: 1.0,
            l_d_s: 1.0,
            l_a_map: Array2::ones((4, 4)),
            l_r_map: Array2::ones((4, 4)),
            l_es: 1.0,
        };
        let b = total_loss(&all_ones, &mask, &w).unwrap();
        assert!((b.total - 1.61).abs() < 1e-12, "{}", b.total);
        // breakdown recombines to the total
        let recombined = w.lambda_d * (b.l_d_t + b.l_d_s)
            + w.lambda_a * b.l_a
            + w.lambda_r * b.l_r
            + w.lambda_es * b.l_es;
        assert!((b.total - recombined).abs() < 1e-6);
    }

    fn zeros_clone(p: &TotalLossParts) -> TotalLossParts {
        TotalLossParts {
            l_d_t: p.l_d_t,
            l_d_s: p.l_d_s,
            l_a_map: p.l_a_map.clone(),
            l_r_map: p.l_r_map.clone(),
            l_es: p.l_es,
        }
    }

    #[test]
    fn total_loss_empty_mask_drops_masked_terms() {
        let parts = TotalLossParts {
            l_d_t: 0.5,
            l_d_s: 0.5,
            l_a_map: Array2::ones((4, 4)),
            l_r_map: Array2::ones((4, 4)),
            l_es: 1.0,
        };
        let mask = AutoMask::new(Array2::zeros((4, 4)), Array2::ones((4, 4)));
        let w = LossWeights::default();
        let b = total_loss(&parts, &mask, &w).unwrap();
        assert!(b.mask_empty);
        assert_eq!(b.l_a, 0.0);
        assert_eq!(b.l_r, 0.0);
        assert!((b.total - (0.2 * 1.0 + 0.01)).abs() < 1e-15);
    }

    #[test]
    fn masked_mean_with_full_mask_equals_plain_mean() {
        let map = Array2::from_shape_fn((5, 5), |(i, j)| (i * 5 + j) as f64 / 10.0);
        let mut tape = Tape::new();
        let m = tape.leaf(map.clone().into_dyn());
        let mm = masked_mean_vars(&mut tape, m, &Array2::ones((5, 5)));
        let expect = map.sum() / 25.0;
        assert!((tape.scalar_value(mm) - expect).abs() < 1e-12);
    }

    #[test]
    fn mu_is_product_of_mu1_and_mu2() {
        let mut rng = StdRng::seed_from_u64(20);
        let mu1 = Array2::from_shape_fn((6, 6), |_| f64::from(rng.gen_bool(0.5)));
        let mu2 = Array2::from_shape_fn((6, 6), |_| f64::from(rng.gen_bool(0.5)));
        let m = AutoMask::new(mu1.clone(), mu2.clone());
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m.mu[[i, j]], mu1[[i, j]] * mu2[[i, j]]);
            }
        }
    }

    /// FD-check a loss built from two image leaves.
    fn check_image_pair_gradient<F>(build: F, seed: u64)
    where
        F: Fn(&mut Tape, VarId, VarId) -> VarId,
    {
        let mut rng = StdRng::seed_from_u64(seed);
        let a0 = ArrayD::from_shape_fn(ndarray::IxDyn(&[3, 6, 6]), |_| rng.gen_range(0.1..0.9));
        let b0 = ArrayD::from_shape_fn(ndarray::IxDyn(&[3, 6, 6]), |_| rng.gen_range(0.1..0.9));
        let run = |av: &ArrayD<f64>, bv: &ArrayD<f64>| {
            let mut t = Tape::new();
            let a = t.leaf(av.clone());
            let b = t.leaf(bv.clone());
            let out = build(&mut t, a, b);
            let l = if t.value(out).len() == 1 {
                out
            } else {
                t.mean(out)
            };
            t.scalar_value(l)
        };
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let out = build(&mut tape, a, b);
        let loss = if tape.value(out).len() == 1 {
            out
        } else {
            tape.mean(out)
        };
        let grads = tape.backward(loss);
        for (id, x0, which) in [(a, &a0, 0usize), (b, &b0, 1)] {
            let fd = finite_difference_gradient(
                |x| if which == 0 { run(x, &b0) } else { run(&a0, x) },
                x0,
                1e-4,
            );
            let err = gradient_rel_error(grads.get(id).unwrap(), &fd);
            assert!(err < 1e-3, "input {which}: err {err}");
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // the shared photometric form used by the reconstruction losses
        check_image_pair_gradient(|t, a, b| photometric_map_vars(t, a, b, 0.85), 61);
        // albedo L1
        check_image_pair_gradient(albedo_loss_map_vars, 62);
        // decomposition: gradient w.r.t. albedo and shading
        let mut rng = StdRng::seed_from_u64(63);
        let a0 = ArrayD::from_shape_fn(ndarray::IxDyn(&[3, 6, 6]), |_| rng.gen_range(0.1..0.9));
        let s0 = ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 6, 6]), |_| rng.gen_range(0.2..1.5));
        let i0 = ArrayD::from_shape_fn(ndarray::IxDyn(&[3, 6, 6]), |_| rng.gen_range(0.1..0.9));
        let run = |av: &ArrayD<f64>, sv: &ArrayD<f64>| {
            let mut t = Tape::new();
            let a = t.leaf(av.clone());
            let s = t.leaf(sv.clone());
            let i = t.leaf(i0.clone());
            let l = decomposition_loss_vars(&mut t, a, s, i, 0.85);
            t.scalar_value(l)
        };
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let s = tape.leaf(s0.clone());
        let i = tape.leaf(i0.clone());
        let l = decomposition_loss_vars(&mut tape, a, s, i, 0.85);
        let grads = tape.backward(l);
        let fd_a = finite_difference_gradient(|x| run(x, &s0), &a0, 1e-4);
        assert!(gradient_rel_error(grads.get(a).unwrap(), &fd_a) < 1e-3);
        let fd_s = finite_difference_gradient(|x| run(&a0, x), &s0, 1e-4);
        assert!(gradient_rel_error(grads.get(s).unwrap(), &fd_s) < 1e-3);
        let run_i = |iv: &ArrayD<f64>| {
            let mut t = Tape::new();
            let a = t.leaf(a0.clone());
            let s = t.leaf(s0.clone());
            let i = t.leaf(iv.clone());
            let l = decomposition_loss_vars(&mut t, a, s, i, 0.85);
            t.scalar_value(l)
        };
        let fd_i = finite_difference_gradient(run_i, &i0, 1e-4);
        assert!(gradient_rel_error(grads.get(i).unwrap(), &fd_i) < 1e-3);

        // smoothness: gradient w.r.t. depth and the image
        let d0 = ArrayD::from_shape_fn(ndarray::IxDyn(&[6, 6]), |_| rng.gen_range(1.0..3.0));
        let img0 = ArrayD::from_shape_fn(ndarray::IxDyn(&[3, 6, 6]), |_| rng.gen_range(0.1..0.9));
        let run_s = |dv: &ArrayD<f64>, iv: &ArrayD<f64>| {
            let mut t = Tape::new();
            let d = t.leaf(dv.clone());
            let img = t.leaf(iv.clone());
            let l = smoothness_loss_vars(&mut t, d, img, true);
            t.scalar_value(l)
        };
        let mut tape = Tape::new();
        let d = tape.leaf(d0.clone());
        let img = tape.leaf(img0.clone());
        let l = smoothness_loss_vars(&mut tape, d, img, true);
        let grads = tape.backward(l);
        let fd_d = finite_difference_gradient(|x| run_s(x, &img0), &d0, 1e-4);
        assert!(gradient_rel_error(grads.get(d).unwrap(), &fd_d) < 1e-3);
        let fd_img = finite_difference_gradient(|x| run_s(&d0, x), &img0, 1e-4);
        assert!(gradient_rel_error(grads.get(img).unwrap(), &fd_img) < 1e-3);
    }
}
