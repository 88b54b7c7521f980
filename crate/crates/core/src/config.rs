//! Plain-text `key=value` configuration, shared by every subcommand.
//!
//! Lines are `key=value`; blank lines and lines starting with `#` are
//! ignored. Unknown keys are rejected so typos surface instead of silently
//! falling back to defaults. [`Config::to_key_value_string`] emits the
//! resolved configuration in a fixed key order for run snapshots.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Result, ShadesError};
use crate::losses::LossWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // ingest
    pub out_size: usize,
    pub gaps: Vec<i64>,
    pub frame_cap: usize, // 0 = unlimited
    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub flip_augmentation: bool,
    pub weights: LossWeights,
    pub smoothness_normalize: bool,
    // networks
    pub net_base_width: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub s_max: f64,
    pub pose_scale: f64,
    // specular prior
    pub spec_percentile: f64,
    pub spec_saturation: f64,
    pub spec_dilate_radius: usize,
    pub inpaint_tol: f64,
    pub inpaint_max_iters: usize,
    // inference
    pub infer_threshold: f64, // on the 0..255 scale
    // evaluation / SSM
    pub ssm_box_margin: usize,
    pub ssm_tau: f64,
    pub ssm_min_region_area: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            out_size: 288,
            gaps: vec![-1, 1],
            frame_cap: 0,
            epochs: 20,
            batch_size: 2,
            learning_rate: 1e-4,
            seed: 42,
            flip_augmentation: false,
            weights: LossWeights::default(),
            smoothness_normalize: true,
            net_base_width: 16,
            d_min: 0.1,
            d_max: 100.0,
            s_max: 2.0,
            pose_scale: 0.01,
            spec_percentile: 97.0,
            spec_saturation: 0.25,
            spec_dilate_radius: 2,
            inpaint_tol: 1e-4,
            inpaint_max_iters: 2000,
            infer_threshold: 50.0,
            ssm_box_margin: 10,
            ssm_tau: 0.1,
            ssm_min_region_area: 9,
        }
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_key_values(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: String| ShadesError::InvalidConfig(format!("key '{key}': {e}"));
        match key {
            "out_size" => self.out_size = parse_num(value).map_err(bad)?,
            "gaps" => self.gaps = parse_gaps(value).map_err(bad)?,
            "frame_cap" => self.frame_cap = parse_num(value).map_err(bad)?,
            "epochs" => self.epochs = parse_num(value).map_err(bad)?,
            "batch_size" => self.batch_size = parse_num(value).map_err(bad)?,
            "learning_rate" => self.learning_rate = parse_num(value).map_err(bad)?,
            "seed" => self.seed = parse_num(value).map_err(bad)?,
            "flip_augmentation" => self.flip_augmentation = parse_bool(value).map_err(bad)?,
            "alpha" => self.weights.alpha = parse_num(value).map_err(bad)?,
            "lambda_d" => self.weights.lambda_d = parse_num(value).map_err(bad)?,
            "lambda_a" => self.weights.lambda_a = parse_num(value).map_err(bad)?,
            "lambda_r" => self.weights.lambda_r = parse_num(value).map_err(bad)?,
            "lambda_es" => self.weights.lambda_es = parse_num(value).map_err(bad)?,
            "smoothness_normalize" => {
                self.smoothness_normalize = parse_bool(value).map_err(bad)?
            }
            "net_base_width" => self.net_base_width = parse_num(value).map_err(bad)?,
            "d_min" => self.d_min = parse_num(value).map_err(bad)?,
            "d_max" => self.d_max = parse_num(value).map_err(bad)?,
            "s_max" => self.s_max = parse_num(value).map_err(bad)?,
            "pose_scale" => self.pose_scale = parse_num(value).map_err(bad)?,
            "spec_percentile" => self.spec_percentile = parse_num(value).map_err(bad)?,
            "spec_saturation" => self.spec_saturation = parse_num(value).map_err(bad)?,
            "spec_dilate_radius" => self.spec_dilate_radius = parse_num(value).map_err(bad)?,
            "inpaint_tol" => self.inpaint_tol = parse_num(value).map_err(bad)?,
            "inpaint_max_iters" => self.inpaint_max_iters = parse_num(value).map_err(bad)?,
            "infer_threshold" => self.infer_threshold = parse_num(value).map_err(bad)?,
            "ssm_box_margin" => self.ssm_box_margin = parse_num(value).map_err(bad)?,
            "ssm_tau" => self.ssm_tau = parse_num(value).map_err(bad)?,
            "ssm_min_region_area" => self.ssm_min_region_area = parse_num(value).map_err(bad)?,
            other => {
                return Err(ShadesError::InvalidConfig(format!("unknown key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ShadesError::InvalidConfig(m.to_string()));
        if self.out_size < 8 {
            return fail("out_size must be >= 8");
        }
        if self.gaps.is_empty() || self.gaps.contains(&0) {
            return fail("gaps must be non-empty and non-zero");
        }
        let unique: BTreeSet<_> = self.gaps.iter().collect();
        if unique.len() != self.gaps.len() {
            return fail("gaps must be distinct");
        }
        if self.epochs < 1 {
            return fail("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return fail("learning_rate must be > 0");
        }
        if !(0.0..=1.0).contains(&self.weights.alpha) {
            return fail("alpha must be in [0,1]");
        }
        for (name, l) in [
            ("lambda_d", self.weights.lambda_d),
            ("lambda_a", self.weights.lambda_a),
            ("lambda_r", self.weights.lambda_r),
            ("lambda_es", self.weights.lambda_es),
        ] {
            if l.is_nan() || l < 0.0 {
                return Err(ShadesError::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        if self.d_min.is_nan() || self.d_max.is_nan() || self.d_min <= 0.0 || self.d_min >= self.d_max {
            return fail("need 0 < d_min < d_max");
        }
        if self.s_max.is_nan() || self.s_max <= 0.0 {
            return fail("s_max must be > 0");
        }
        if !(0.0..=100.0).contains(&self.spec_percentile) {
            return fail("spec_percentile must be in [0,100]");
        }
        if self.ssm_box_margin < 1 {
            return fail("ssm_box_margin must be >= 1");
        }
        if self.ssm_tau.is_nan() || self.ssm_tau <= 0.0 {
            return fail("ssm_tau must be > 0");
        }
        Ok(())
    }

    /// Resolved configuration as `key=value` lines in fixed order.
    pub fn to_key_value_string(&self) -> String {
        let gaps = self
            .gaps
            .iter()
            .map(|g| g.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "out_size={}\ngaps={}\nframe_cap={}\nepochs={}\nbatch_size={}\nlearning_rate={}\nseed={}\nflip_augmentation={}\nalpha={}\nlambda_d={}\nlambda_a={}\nlambda_r={}\nlambda_es={}\nsmoothness_normalize={}\nnet_base_width={}\nd_min={}\nd_max={}\ns_max={}\npose_scale={}\nspec_percentile={}\nspec_saturation={}\nspec_dilate_radius={}\ninpaint_tol={}\ninpaint_max_iters={}\ninfer_threshold={}\nssm_box_margin={}\nssm_tau={}\nssm_min_region_area={}\n",
            self.out_size,
            gaps,
            self.frame_cap,
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.seed,
            self.flip_augmentation,
            self.weights.alpha,
            self.weights.lambda_d,
            self.weights.lambda_a,
            self.weights.lambda_r,
            self.weights.lambda_es,
            self.smoothness_normalize,
            self.net_base_width,
            self.d_min,
            self.d_max,
            self.s_max,
            self.pose_scale,
            self.spec_percentile,
            self.spec_saturation,
            self.spec_dilate_radius,
            self.inpaint_tol,
            self.inpaint_max_iters,
            self.infer_threshold,
            self.ssm_box_margin,
            self.ssm_tau,
            self.ssm_min_region_area,
        )
    }
}

/// Parse `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            ShadesError::InvalidConfig(format!("line {}: expected key=value", lineno + 1))
        })?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| e.to_string())
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        other => Err(format!("expected boolean, got '{other}'")),
    }
}

fn parse_gaps(v: &str) -> std::result::Result<Vec<i64>, String> {
    let mut gaps: Vec<i64> = v
        .split(',')
        .map(|s| s.trim().parse().map_err(|e: std::num::ParseIntError| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    gaps.sort_unstable();
    Ok(gaps)
}
