//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use shades_core::config::Config;
use shades_core::evaluation::{
    average_metrics, depth_metrics, median_scale, ssm, DepthMetrics, SsmConfig,
};
use shades_core::inference::{infer, write_outputs};
use shades_core::ingest::{
    crop_resize, list_frame_files, list_sequences, load_sequence, undistort, CameraModel, Frame,
};
use shades_core::io;
use shades_core::networks::{load_checkpoint, pose_forward};
use shades_core::specular::{
    compute_i_rem, InpaintParams, PriorCache, SegmentParams,
};
use shades_core::trainer::{samples_from_sequence_dir, train_loop, TrainConfig, TrainSample};
use shades_core::warp::DepthMap;

use crate::manifest::RunManifest;
use crate::panels::{export_panel, result_stems};

fn load_config(path: Option<&Path>) -> Result<Config> {
    Ok(match path {
        Some(p) => Config::from_file(p).with_context(|| format!("config {}", p.display()))?,
        None => Config::default(),
    })
}

fn segment_params(cfg: &Config) -> SegmentParams {
    SegmentParams {
        percentile: cfg.spec_percentile,
        saturation_max: cfg.spec_saturation,
        dilate_radius: cfg.spec_dilate_radius,
    }
}

fn inpaint_params(cfg: &Config) -> InpaintParams {
    InpaintParams {
        tol: cfg.inpaint_tol,
        max_iters: cfg.inpaint_max_iters,
    }
}

/// `preprocess`: fill the `_rem/` and `_mask/` prior caches next to every
/// sequence directory.
pub fn preprocess(data: &Path, camera: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let cam = CameraModel::from_file(camera)?;
    let seg = segment_params(&cfg);
    let inp = inpaint_params(&cfg);
    let sequences = list_sequences(data)?;
    if sequences.is_empty() {
        bail!("no sequence directories with images under {}", data.display());
    }
    for seq_dir in &sequences {
        let frames = load_sequence(seq_dir, &cam, &cfg)?;
        let cache = PriorCache::for_sequence_dir(seq_dir);
        for frame in &frames {
            let (rem, mask) = compute_i_rem(frame, &seg, &inp)?;
            cache.store(frame, &rem, &mask)?;
        }
        eprintln!(
            "preprocessed {} frames of {}",
            frames.len(),
            seq_dir.display()
        );
    }
    RunManifest::new("preprocess", &cfg.to_key_value_string(), &[data, camera])?
        .write(&data.join("preprocess_manifest.json"))?;
    Ok(())
}

/// `train`: run the self-supervised loop over every sequence under the data
/// root, using the cached priors.
pub fn train(data: &Path, camera: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let cam = CameraModel::from_file(camera)?;
    let sequences = list_sequences(data)?;
    if sequences.is_empty() {
        bail!("no sequence directories with images under {}", data.display());
    }
    let mut samples: Vec<TrainSample> = Vec::new();
    for seq_dir in &sequences {
        let frames = load_sequence(seq_dir, &cam, &cfg)?;
        samples.extend(samples_from_sequence_dir(seq_dir, &frames, &cfg.gaps)?);
    }
    let train_cfg = TrainConfig::from_config(&cfg);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config_resolved.txt"), cfg.to_key_value_string())?;
    let outcome = train_loop(&samples, &train_cfg, &cam, Some(out))?;
    eprintln!(
        "trained {} steps over {} samples; final checkpoint {}",
        outcome.state.step,
        samples.len(),
        outcome
            .checkpoints
            .last()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    );
    RunManifest::new("train", &cfg.to_key_value_string(), &[data, camera])?
        .write(&out.join("manifest.json"))?;
    Ok(())
}

/// `infer`: single-frame outputs for every image in the input directory.
/// With `--camera`, inputs are cropped/resized/undistorted to the
/// checkpoint's resolution first; otherwise they must already match it.
pub fn infer_dir(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    pose_pairs: bool,
    camera: Option<&Path>,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let (store, meta) = load_checkpoint(checkpoint)?;
    let cam = camera.map(CameraModel::from_file).transpose()?;
    let files = list_frame_files(input)?;
    if files.is_empty() {
        bail!("no images under {}", input.display());
    }
    let mut frames = Vec::new();
    let mut stems = Vec::new();
    for (index, path) in files.iter().enumerate() {
        let raw = io::load_rgb(path)?;
        let mut frame = Frame::new(raw, "infer", index);
        if let Some(cam) = &cam {
            frame = crop_resize(&frame, meta.net.input_size)?;
            frame = undistort(&frame, cam)?;
        }
        stems.push(
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("{index:06}")),
        );
        frames.push(frame);
    }
    for (frame, stem) in frames.iter().zip(stems.iter()) {
        let result = infer(frame, &store, &meta, None, cfg.infer_threshold)?;
        write_outputs(out, stem, frame, &result)?;
    }
    if pose_pairs {
        let mut rows = vec![
            "target,source,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz".to_string(),
        ];
        for k in 0..frames.len().saturating_sub(1) {
            let v = pose_forward(&frames[k], &frames[k + 1], &store, &meta.net)?;
            let pose = shades_core::networks::pose_vec_to_se3(&v);
            let r = pose.rotation;
            let t = pose.translation;
            rows.push(format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                stems[k],
                stems[k + 1],
                r[0][0], r[0][1], r[0][2],
                r[1][0], r[1][1], r[1][2],
                r[2][0], r[2][1], r[2][2],
                t[0], t[1], t[2]
            ));
        }
        std::fs::write(out.join("poses.csv"), rows.join("\n") + "\n")?;
    }
    eprintln!("inferred {} frames into {}", frames.len(), out.display());
    let mut inputs: Vec<&Path> = vec![checkpoint, input];
    if let Some(c) = camera {
        inputs.push(c);
    }
    RunManifest::new("infer", &cfg.to_key_value_string(), &inputs)?
        .write(&out.join("manifest.json"))?;
    Ok(())
}

struct EvalRow {
    name: String,
    metrics: DepthMetrics,
    ssm: Option<f64>,
}

/// Prediction depth files: `*_depth.png` (inference layout) or plain
/// `*.png`, with their stems.
fn prediction_files(pred: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut with_suffix = Vec::new();
    let mut plain = Vec::new();
    for entry in std::fs::read_dir(pred)
        .with_context(|| format!("reading prediction dir {}", pred.display()))?
    {
        let path = entry?.path();
        let Some(name) = path.file_name().map(|n| n.to_string_lossy().into_owned()) else {
            continue;
        };
        if let Some(stem) = name.strip_suffix("_depth.png") {
            with_suffix.push((stem.to_string(), path));
        } else if let Some(stem) = name.strip_suffix(".png") {
            plain.push((stem.to_string(), path.clone()));
        }
    }
    let mut files = if with_suffix.is_empty() { plain } else { with_suffix };
    files.sort();
    Ok(files)
}

/// `eval`: median-scaled direct error metrics per image plus an AVERAGE row;
/// optional SSM column when specular masks are supplied.
pub fn eval(
    pred: &Path,
    gt: &Path,
    spec_masks: Option<&Path>,
    out: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let ssm_cfg = SsmConfig {
        box_margin: cfg.ssm_box_margin,
        closeness_tau: cfg.ssm_tau,
        min_region_area: cfg.ssm_min_region_area,
    };
    let preds = prediction_files(pred)?;
    if preds.is_empty() {
        bail!("no prediction depth PNGs under {}", pred.display());
    }
    let mut rows: Vec<EvalRow> = Vec::new();
    for (stem, pred_path) in &preds {
        let gt_path = gt.join(format!("{stem}.png"));
        if !gt_path.exists() {
            bail!("no ground truth for {stem} under {}", gt.display());
        }
        let (pred_depth, pred_valid) = io::load_depth(pred_path)?;
        let (gt_depth, gt_valid) = io::load_depth(&gt_path)?;
        if pred_depth.dim() != gt_depth.dim() {
            bail!("{stem}: prediction and ground truth sizes differ");
        }
        let valid = &pred_valid * &gt_valid;
        // median_scale requires positive predictions on valid pixels; feed a
        // positive placeholder into invalid slots (they are masked out)
        let safe_pred = DepthMap::new(pred_depth.mapv(|d| if d > 0.0 { d } else { 1.0 }))
            .context("prediction depth")?;
        let scaled = median_scale(&safe_pred, &gt_depth, &valid)?;
        let metrics = depth_metrics(&scaled, &gt_depth, &valid)?;
        let ssm_value = match spec_masks {
            Some(masks_dir) => {
                let mask_path = ["{stem}.png", "{stem}_mask.png"]
                    .iter()
                    .map(|pat| masks_dir.join(pat.replace("{stem}", stem)))
                    .find(|p| p.exists());
                match mask_path {
                    Some(p) => {
                        let mask = io::load_mask(&p)?;
                        match ssm(&scaled.data, &mask, &ssm_cfg) {
                            Ok(v) => Some(v),
                            Err(shades_core::ShadesError::NoRegions) => None,
                            Err(e) => return Err(e.into()),
                        }
                    }
                    None => None,
                }
            }
            None => None,
        };
        rows.push(EvalRow {
            name: stem.clone(),
            metrics,
            ssm: ssm_value,
        });
    }

    let mut text = String::from("image,");
    text.push_str(DepthMetrics::csv_header());
    if spec_masks.is_some() {
        text.push_str(",ssm");
    }
    text.push('\n');
    for row in &rows {
        text.push_str(&format!("{},{}", row.name, row.metrics.to_csv_fields()));
        if spec_masks.is_some() {
            match row.ssm {
                Some(v) => text.push_str(&format!(",{v}")),
                None => text.push_str(",n/a"),
            }
        }
        text.push('\n');
    }
    let avg = average_metrics(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>())
        .expect("at least one row");
    text.push_str(&format!("AVERAGE,{}", avg.to_csv_fields()));
    if spec_masks.is_some() {
        let applicable: Vec<f64> = rows.iter().filter_map(|r| r.ssm).collect();
        if applicable.is_empty() {
            text.push_str(",n/a");
        } else {
            text.push_str(&format!(
                ",{}",
                applicable.iter().sum::<f64>() / applicable.len() as f64
            ));
        }
    }
    text.push('\n');
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(out, text)?;
    eprintln!("wrote {} rows to {}", rows.len() + 1, out.display());

    let mut inputs: Vec<&Path> = vec![pred, gt];
    if let Some(m) = spec_masks {
        inputs.push(m);
    }
    let manifest_path = out.with_extension("manifest.json");
    RunManifest::new("eval", &cfg.to_key_value_string(), &inputs)?.write(&manifest_path)?;
    Ok(())
}

/// `panels`: compose the five-tile figure strip for every frame in an
/// inference results directory.
pub fn panels(results: &Path, out: Option<&Path>) -> Result<()> {
    let out_dir = out.unwrap_or(results);
    let stems = result_stems(results)?;
    if stems.is_empty() {
        bail!(
            "missing artifacts: no *_input.png files under {}",
            results.display()
        );
    }
    for stem in &stems {
        export_panel(results, out_dir, stem)?;
    }
    eprintln!("exported {} panels into {}", stems.len(), out_dir.display());
    RunManifest::new("panels", "", &[results])?.write(&out_dir.join("panels_manifest.json"))?;
    Ok(())
}

/// `selftest`: run the fixture-based oracle suite of every module.
pub fn selftest() -> Result<()> {
    let results = shades_core::selftest::run_all();
    let mut failures = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                println!("FAIL {name}: {msg}");
                failures += 1;
            }
        }
    }
    RunManifest::new("selftest", "", &[])?.write(Path::new("selftest_manifest.json"))?;
    if failures > 0 {
        bail!("{failures} of {} selftest groups failed", results.len());
    }
    println!("all {} selftest groups passed", results.len());
    Ok(())
}

