//! Small shared array helpers.

use ndarray::{Array2, Array3, ArrayD, IxDyn};

/// `[H, W, C]` image to the `[C, H, W]` layout the tape ops use.
pub fn hwc_to_chw(img: &Array3<f64>) -> ArrayD<f64> {
    let (h, w, c) = img.dim();
    let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                out[[k, i, j]] = img[[i, j, k]];
            }
        }
    }
    out
}

/// `[C, H, W]` tape image back to `[H, W, C]`.
pub fn chw_to_hwc(img: &ArrayD<f64>) -> Array3<f64> {
    assert_eq!(img.ndim(), 3);
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    Array3::from_shape_fn((h, w, c), |(i, j, k)| img[[k, i, j]])
}

/// Elementwise product of two binary masks.
pub fn mask_and(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    a * b
}

/// Elementwise OR of two binary masks.
pub fn mask_or(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    ndarray::Zip::from(&mut out)
        .and(b)
        .for_each(|o, &bv| *o = if *o > 0.5 || bv > 0.5 { 1.0 } else { 0.0 });
    out
}
