//! Property tests over the library invariants that hold for arbitrary
//! inputs, not just the hand-built fixtures.

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use shades_core::inference::derive_spec_mask;
use shades_core::ingest::{crop_resize, pair_indices, Frame};
use shades_core::losses::{photometric_loss, LossWeights};
use shades_core::networks::{disp_to_depth, DisparityMap};
use shades_core::specular::{inpaint, InpaintParams, SpecularMaskTrad};

fn image_strategy(h: usize, w: usize) -> impl Strategy<Value = Array3<f64>> {
    proptest::collection::vec(0.0f64..1.0, h * w * 3)
        .prop_map(move |v| Array3::from_shape_vec((h, w, 3), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Harmonic fill never invents values outside the unmasked range, and
    /// unmasked pixels come back bit-identical.
    #[test]
    fn inpaint_maximum_principle_and_exactness(
        img in image_strategy(7, 7),
        mask_bits in proptest::collection::vec(any::<bool>(), 49),
    ) {
        let mask = Array2::from_shape_fn((7, 7), |(i, j)| f64::from(mask_bits[i * 7 + j]));
        prop_assume!(mask.sum() < 49.0);
        let frame = Frame::new(img.clone(), "p", 0);
        let out = inpaint(
            &frame,
            &SpecularMaskTrad { mask: mask.clone() },
            &InpaintParams::default(),
        )
        .unwrap();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..7 {
            for j in 0..7 {
                if mask[[i, j]] < 0.5 {
                    for c in 0..3 {
                        lo = lo.min(img[[i, j, c]]);
                        hi = hi.max(img[[i, j, c]]);
                        prop_assert_eq!(out.pixels[[i, j, c]], img[[i, j, c]]);
                    }
                }
            }
        }
        for i in 0..7 {
            for j in 0..7 {
                if mask[[i, j]] > 0.5 {
                    for c in 0..3 {
                        let v = out.pixels[[i, j, c]];
                        prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
                    }
                }
            }
        }
    }

    /// The photometric map is non-negative for any image pair.
    #[test]
    fn photometric_map_is_non_negative(
        a in image_strategy(6, 6),
        b in image_strategy(6, 6),
    ) {
        let map = photometric_loss(&a, &b, &LossWeights::default()).unwrap();
        prop_assert!(map.iter().all(|&v| v >= 0.0));
    }

    /// Raising the threshold never adds pixels to the specular mask, and the
    /// extreme thresholds behave as documented.
    #[test]
    fn spec_mask_monotone_in_threshold(
        frame in image_strategy(6, 6),
        recon in image_strategy(6, 6),
        t1 in 0.0f64..255.0,
        t2 in 0.0f64..255.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let m_lo = derive_spec_mask(&frame, &recon, lo);
        let m_hi = derive_spec_mask(&frame, &recon, hi);
        for (h, l) in m_hi.iter().zip(m_lo.iter()) {
            prop_assert!(h <= l);
        }
        prop_assert_eq!(derive_spec_mask(&frame, &recon, 255.0).sum(), 0.0);
    }

    /// Bounded disparity-to-depth stays inside (d_min, d_max) and decreases.
    #[test]
    fn disp_to_depth_monotone_and_bounded(
        d1 in 0.001f64..0.999,
        d2 in 0.001f64..0.999,
    ) {
        prop_assume!(d1 < d2);
        let depth = |d: f64| {
            disp_to_depth(
                &DisparityMap { disp: Array2::from_elem((1, 1), d) },
                0.1,
                100.0,
            )
            .unwrap()
            .data[[0, 0]]
        };
        let (z1, z2) = (depth(d1), depth(d2));
        prop_assert!(z1 > z2, "larger disparity means smaller depth");
        prop_assert!(z1 > 0.1 && z1 < 100.0);
        prop_assert!(z2 > 0.1 && z2 < 100.0);
    }

    /// Pair enumeration matches the closed-form count for arbitrary gap sets.
    #[test]
    fn pair_count_closed_form(
        len in 2usize..40,
        gaps in proptest::collection::btree_set(-5i64..=5, 1..4),
    ) {
        let gaps: Vec<i64> = gaps.into_iter().filter(|&g| g != 0).collect();
        prop_assume!(!gaps.is_empty());
        let expect: usize = gaps
            .iter()
            .map(|&g| len.saturating_sub(g.unsigned_abs() as usize))
            .sum();
        prop_assert_eq!(pair_indices(len, &gaps).len(), expect);
    }

    /// Crop-resize always emits the requested square with values in range.
    #[test]
    fn crop_resize_contract(
        h in 8usize..24,
        w in 8usize..24,
        out in 2usize..16,
    ) {
        let img = Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
            ((i * 7 + j * 3 + c) % 13) as f64 / 13.0
        });
        let frame = Frame::new(img, "p", 0);
        let resized = crop_resize(&frame, out).unwrap();
        prop_assert_eq!(resized.pixels.dim(), (out, out, 3));
        prop_assert!(resized.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
