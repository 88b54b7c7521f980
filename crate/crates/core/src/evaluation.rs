//! Quantitative evaluation: median-scaled direct depth error metrics and the
//! Specularity Surrounding Metric (SSM) for unlabelled data.

use ndarray::Array2;

use crate::error::{Result, ShadesError};
use crate::warp::DepthMap;

/// The nine direct error metrics of one image (or an average of images).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub mae: f64,
    pub medae: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub fn csv_header() -> &'static str {
        "mae,medae,rmse,rmse_log,abs_rel,sq_rel,delta1,delta2,delta3"
    }

    pub fn to_csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.mae,
            self.medae,
            self.rmse,
            self.rmse_log,
            self.abs_rel,
            self.sq_rel,
            self.delta1,
            self.delta2,
            self.delta3
        )
    }
}

/// SSM parameters. The defaults are module-defined: the bounding box grows by
/// `box_margin` pixels on every side, a region counts as smooth when its mean
/// depth is within `closeness_tau` (relative) of the surrounding mean, and
/// components smaller than `min_region_area` pixels are ignored.
#[derive(Debug, Clone, Copy)]
pub struct SsmConfig {
    pub box_margin: usize,
    pub closeness_tau: f64,
    pub min_region_area: usize,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            box_margin: 10,
            closeness_tau: 0.1,
            min_region_area: 9,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Rescale a prediction by `median(gt[valid]) / median(pred[valid])`, the
/// standard resolution of the monocular scale ambiguity.
pub fn median_scale(
    pred: &DepthMap,
    gt: &Array2<f64>,
    valid: &Array2<f64>,
) -> Result<DepthMap> {
    let mut pred_vals = Vec::new();
    let mut gt_vals = Vec::new();
    for ((p, g), v) in pred.data.iter().zip(gt.iter()).zip(valid.iter()) {
        if *v > 0.5 {
            pred_vals.push(*p);
            gt_vals.push(*g);
        }
    }
    if pred_vals.is_empty() {
        return Err(ShadesError::InvalidInput("empty validity mask".into()));
    }
    let med_pred = median(&mut pred_vals);
    if med_pred <= 0.0 {
        return Err(ShadesError::DegeneratePrediction);
    }
    let scale = median(&mut gt_vals) / med_pred;
    DepthMap::new(pred.data.mapv(|p| p * scale))
}

/// Direct error metrics of one scaled prediction against ground truth over
/// the valid pixels.
pub fn depth_metrics(
    pred_scaled: &DepthMap,
    gt: &Array2<f64>,
    valid: &Array2<f64>,
) -> Result<DepthMetrics> {
    let mut abs_err = Vec::new();
    let (mut se, mut sle, mut ar, mut sr) = (0.0, 0.0, 0.0, 0.0);
    let (mut d1, mut d2, mut d3) = (0.0, 0.0, 0.0);
    let mut n = 0.0;
    for ((p, g), v) in pred_scaled.data.iter().zip(gt.iter()).zip(valid.iter()) {
        if *v <= 0.5 {
            continue;
        }
        if !(*p > 0.0 && *g > 0.0) {
            return Err(ShadesError::InvalidInput(
                "depth must be positive on valid pixels".into(),
            ));
        }
        let e = p - g;
        abs_err.push(e.abs());
        se += e * e;
        let le = g.ln() - p.ln();
        sle += le * le;
        ar += e.abs() / g;
        sr += e * e / g;
        let ratio = (g / p).max(p / g);
        if ratio < 1.25 {
            d1 += 1.0;
        }
        if ratio < 1.25f64.powi(2) {
            d2 += 1.0;
        }
        if ratio < 1.25f64.powi(3) {
            d3 += 1.0;
        }
        n += 1.0;
    }
    if n == 0.0 {
        return Err(ShadesError::InvalidInput("empty validity mask".into()));
    }
    Ok(DepthMetrics {
        mae: abs_err.iter().sum::<f64>() / n,
        medae: median(&mut abs_err),
        rmse: (se / n).sqrt(),
        rmse_log: (sle / n).sqrt(),
        abs_rel: ar / n,
        sq_rel: sr / n,
        delta1: d1 / n,
        delta2: d2 / n,
        delta3: d3 / n,
    })
}

/// Per-image-then-average aggregation, applied to every metric including the
/// median-based ones.
pub fn average_metrics(rows: &[DepthMetrics]) -> Option<DepthMetrics> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let sum = |f: fn(&DepthMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Some(DepthMetrics {
        mae: sum(|m| m.mae),
        medae: sum(|m| m.medae),
        rmse: sum(|m| m.rmse),
        rmse_log: sum(|m| m.rmse_log),
        abs_rel: sum(|m| m.abs_rel),
        sq_rel: sum(|m| m.sq_rel),
        delta1: sum(|m| m.delta1),
        delta2: sum(|m| m.delta2),
        delta3: sum(|m| m.delta3),
    })
}

/// 8-connected components of a binary mask with at least `min_area` pixels.
fn connected_components(mask: &Array2<f64>, min_area: usize) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::<u8>::zeros((h, w));
    let mut regions = Vec::new();
    for si in 0..h {
        for sj in 0..w {
            if mask[[si, sj]] < 0.5 || seen[[si, sj]] != 0 {
                continue;
            }
            let mut stack = vec![(si, sj)];
            seen[[si, sj]] = 1;
            let mut region = Vec::new();
            while let Some((i, j)) = stack.pop() {
                region.push((i, j));
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (y, x) = (i as i64 + di, j as i64 + dj);
                        if y < 0 || y >= h as i64 || x < 0 || x >= w as i64 {
                            continue;
                        }
                        let (y, x) = (y as usize, x as usize);
                        if mask[[y, x]] > 0.5 && seen[[y, x]] == 0 {
                            seen[[y, x]] = 1;
                            stack.push((y, x));
                        }
                    }
                }
            }
            if region.len() >= min_area {
                regions.push(region);
            }
        }
    }
    regions
}

/// Specularity Surrounding Metric: the percentage of specular regions whose
/// mean depth stays within `closeness_tau` (relative) of their surrounding
/// mean depth. Surroundings are the margin-expanded bounding box minus every
/// specular pixel. Fails with `NoRegions` when no region qualifies.
pub fn ssm(depth: &Array2<f64>, spec_mask: &Array2<f64>, config: &SsmConfig) -> Result<f64> {
    let (h, w) = depth.dim();
    if spec_mask.dim() != (h, w) {
        return Err(ShadesError::InvalidInput(
            "depth and mask shapes differ".into(),
        ));
    }
    let regions = connected_components(spec_mask, config.min_region_area.max(1));
    let mut total = 0usize;
    let mut smooth = 0usize;
    for region in &regions {
        let mean_spec = region.iter().map(|&(i, j)| depth[[i, j]]).sum::<f64>()
            / region.len() as f64;
        let (mut i0, mut i1, mut j0, mut j1) = (usize::MAX, 0usize, usize::MAX, 0usize);
        for &(i, j) in region {
            i0 = i0.min(i);
            i1 = i1.max(i);
            j0 = j0.min(j);
            j1 = j1.max(j);
        }
        let m = config.box_margin;
        let (bi0, bi1) = (i0.saturating_sub(m), (i1 + m).min(h - 1));
        let (bj0, bj1) = (j0.saturating_sub(m), (j1 + m).min(w - 1));
        let mut surr_sum = 0.0;
        let mut surr_n = 0.0;
        for i in bi0..=bi1 {
            for j in bj0..=bj1 {
                if spec_mask[[i, j]] < 0.5 {
                    surr_sum += depth[[i, j]];
                    surr_n += 1.0;
                }
            }
        }
        if surr_n == 0.0 {
            continue; // no surround to compare against
        }
        let mean_surr = surr_sum / surr_n;
        total += 1;
        if (mean_spec - mean_surr).abs() / mean_surr < config.closeness_tau {
            smooth += 1;
        }
    }
    if total == 0 {
        return Err(ShadesError::NoRegions);
    }
    Ok(100.0 * smooth as f64 / total as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ranks = |xs: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&p, &q| xs[p].partial_cmp(&xs[q]).expect("finite values"));
        let mut out = vec![0.0; xs.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut end = k;
            while end + 1 < idx.len() && xs[idx[end + 1]] == xs[idx[k]] {
                end += 1;
            }
            let avg = (k + end) as f64 / 2.0;
            for &i in &idx[k..=end] {
                out[i] = avg;
            }
            k = end + 1;
        }
        out
    };
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(rb.iter()) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    cov / (va.sqrt() * vb.sqrt()).max(1e-12)
}
