//! Self-supervised training loop: wires decomposition, depth, pose, warping,
//! the priors, and the losses into gradient steps with Adam, epoch
//! checkpoints, and a CSV log.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::config::Config;
use crate::error::{Result, ShadesError};
use crate::ingest::{CameraModel, Frame};
use crate::losses::{
    albedo_loss_map_vars, decomposition_loss_vars, photometric_map_vars, smoothness_loss_vars,
    total_loss_vars, AutoMask, LossWeights, TotalLossVars,
};
use crate::networks::{
    decompose_forward_vars, depth_forward_vars, disp_to_depth_vars, init_params,
    pose_forward_vars, save_checkpoint, Bindings, CheckpointMeta, NetConfig, ParamStore,
};
use crate::tape::{Tape, VarId};
use crate::util::{chw_to_hwc, hwc_to_chw, mask_or};
use crate::warp::{
    axis_angle_rotation_vars, sample_at_coords, validity_masks, warp_coords_vars,
};

/// Trainer settings, usually derived from the toolkit [`Config`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub flip_augmentation: bool,
    pub smoothness_normalize: bool,
    pub net: NetConfig,
}

impl TrainConfig {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
            weights: cfg.weights,
            flip_augmentation: cfg.flip_augmentation,
            smoothness_normalize: cfg.smoothness_normalize,
            net: NetConfig {
                input_size: cfg.out_size,
                base_width: cfg.net_base_width,
                d_min: cfg.d_min,
                d_max: cfg.d_max,
                s_max: cfg.s_max,
                pose_scale: cfg.pose_scale,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(ShadesError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(ShadesError::InvalidConfig(
                "learning_rate must be > 0".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(ShadesError::InvalidConfig("batch_size must be >= 1".into()));
        }
        self.net.validate()
    }
}

/// One logged training step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub l_d_t: f64,
    pub l_d_s: f64,
    pub l_a: f64,
    pub l_r: f64,
    pub l_es: f64,
    pub mask_coverage: f64,
}

impl StepRecord {
    pub fn csv_header() -> &'static str {
        "step,total,l_d_t,l_d_s,l_a,l_r,l_es,mask_coverage"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.total,
            self.l_d_t,
            self.l_d_s,
            self.l_a,
            self.l_r,
            self.l_es,
            self.mask_coverage
        )
    }
}

/// A target frame, its source frames, and the cached priors for all of them.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub target: Frame,
    pub sources: Vec<Frame>,
    pub target_rem: Array3<f64>,
    pub source_rems: Vec<Array3<f64>>,
}

/// Group a frame sequence into per-target samples: each target takes the
/// sources its gaps reach. `rems` runs parallel to `frames`.
pub fn build_samples(
    frames: &[Frame],
    rems: &[Array3<f64>],
    gaps: &[i64],
) -> Result<Vec<TrainSample>> {
    if frames.len() < 2 {
        return Err(ShadesError::InsufficientFrames { got: frames.len() });
    }
    assert_eq!(frames.len(), rems.len(), "one prior per frame");
    let mut sorted: Vec<i64> = gaps.to_vec();
    sorted.sort_unstable();
    let mut samples = Vec::new();
    for t in 0..frames.len() as i64 {
        let mut sources = Vec::new();
        let mut source_rems = Vec::new();
        for &g in &sorted {
            let s = t + g;
            if s >= 0 && s < frames.len() as i64 {
                sources.push(frames[s as usize].clone());
                source_rems.push(rems[s as usize].clone());
            }
        }
        if !sources.is_empty() {
            samples.push(TrainSample {
                target: frames[t as usize].clone(),
                sources,
                target_rem: rems[t as usize].clone(),
                source_rems,
            });
        }
    }
    Ok(samples)
}

/// Adam moment buffers, aligned with the parameter store order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            m: store.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect(),
            v: store.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[ArrayD<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = store.names().map(String::from).collect();
        for (k, name) in names.iter().enumerate() {
            let g = &grads[k];
            let m = &mut self.m[k];
            ndarray::Zip::from(&mut *m)
                .and(g)
                .for_each(|mv, &gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            let v = &mut self.v[k];
            ndarray::Zip::from(&mut *v)
                .and(g)
                .for_each(|vv, &gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let param = store.get_mut(name);
            ndarray::Zip::from(param)
                .and(&self.m[k])
                .and(&self.v[k])
                .for_each(|p, &mv, &vv| {
                    let mh = mv / bc1;
                    let vh = vv / bc2;
                    *p -= lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

/// Mutable training state: parameters, optimizer, step counter.
pub struct TrainState {
    pub store: ParamStore,
    pub adam: AdamState,
    pub step: usize,
    pub cfg: TrainConfig,
    pub cam: CameraModel,
}

impl TrainState {
    pub fn new(cfg: TrainConfig, cam: CameraModel) -> Result<Self> {
        cfg.validate()?;
        let store = init_params(&cfg.net, cfg.seed)?;
        let adam = AdamState::new(&store);
        Ok(Self {
            store,
            adam,
            step: 0,
            cfg,
            cam,
        })
    }
}

/// Everything measured while assembling one sample's loss.
struct SampleLoss {
    total: VarId,
    l_d_t: f64,
    l_d_s: f64,
    l_a: f64,
    l_r: f64,
    l_es: f64,
    coverage: f64,
    mask: AutoMask,
}

/// Build the full training objective for one sample on the given tape:
/// decomposition of every frame, depth and pose, shared-coordinate warps,
/// the two auto-masks, and the weighted total.
fn build_sample_loss(
    tape: &mut Tape,
    bind: &Bindings,
    sample: &TrainSample,
    cfg: &TrainConfig,
    cam: &CameraModel,
) -> SampleLoss {
    build_sample_loss_with(tape, bind, sample, cfg, cam, None)
}

/// As [`build_sample_loss`], but with an optional fixed auto-mask. Masks are
/// constants of the objective (no gradient flows through a mask decision),
/// so finite-difference checks of the smooth part pin them explicitly.
fn build_sample_loss_with(
    tape: &mut Tape,
    bind: &Bindings,
    sample: &TrainSample,
    cfg: &TrainConfig,
    cam: &CameraModel,
    fixed_mask: Option<&AutoMask>,
) -> SampleLoss {
    let alpha = cfg.weights.alpha;
    let size = cfg.net.input_size;

    let t_chw = tape.leaf(hwc_to_chw(&sample.target.pixels));
    let t_rem_chw = tape.leaf(hwc_to_chw(&sample.target_rem));

    // target decomposition and depth
    let (a_t, s_t) = decompose_forward_vars(tape, bind, t_chw, cfg.net.s_max);
    let l_d_t = decomposition_loss_vars(tape, a_t, s_t, t_rem_chw, alpha);
    let disp = depth_forward_vars(tape, bind, t_chw);
    let depth_t = disp_to_depth_vars(tape, disp, cfg.net.d_min, cfg.net.d_max);
    let l_es = smoothness_loss_vars(tape, depth_t, t_chw, cfg.smoothness_normalize);

    // per-source terms
    let mut l_d_s_terms = Vec::new();
    let mut l_r_map: Option<VarId> = None;
    let mut l_a_map: Option<VarId> = None;
    let mut mu2_union: Option<Array2<f64>> = None;
    let mut warped_raw_values: Vec<Array3<f64>> = Vec::new();
    for (src, src_rem) in sample.sources.iter().zip(sample.source_rems.iter()) {
        let s_chw = tape.leaf(hwc_to_chw(&src.pixels));
        let s_rem_chw = tape.leaf(hwc_to_chw(src_rem));
        let (a_s, s_s) = decompose_forward_vars(tape, bind, s_chw, cfg.net.s_max);
        l_d_s_terms.push(decomposition_loss_vars(tape, a_s, s_s, s_rem_chw, alpha));

        let pose6 = pose_forward_vars(tape, bind, t_chw, s_chw, cfg.net.pose_scale);
        let w = [
            tape.get(pose6, &[0]),
            tape.get(pose6, &[1]),
            tape.get(pose6, &[2]),
        ];
        let t3 = [
            tape.get(pose6, &[3]),
            tape.get(pose6, &[4]),
            tape.get(pose6, &[5]),
        ];
        let r9 = axis_angle_rotation_vars(tape, &w);
        let coords = warp_coords_vars(tape, depth_t, &r9, &t3, cam);

        let s3 = tape.repeat_channel(s_s, 3);
        let as_s = tape.mul(a_s, s3);
        let as_warp = sample_at_coords(tape, as_s, &coords);
        let a_warp = sample_at_coords(tape, a_s, &coords);
        let raw_warp = sample_at_coords(tape, s_chw, &coords);

        let (mu2_s, _inbounds) = validity_masks(tape, &coords, raw_warp, size, size);
        mu2_union = Some(match mu2_union {
            None => mu2_s,
            Some(acc) => mask_or(&acc, &mu2_s),
        });
        warped_raw_values.push(chw_to_hwc(tape.value(raw_warp)));

        let r_map = photometric_map_vars(tape, as_warp, t_rem_chw, alpha);
        l_r_map = Some(match l_r_map {
            None => r_map,
            Some(acc) => tape.min2(acc, r_map),
        });
        let a_map = albedo_loss_map_vars(tape, a_t, a_warp);
        l_a_map = Some(match l_a_map {
            None => a_map,
            Some(acc) => tape.min2(acc, a_map),
        });
    }
    let l_r_map = l_r_map.expect("at least one source");
    let l_a_map = l_a_map.expect("at least one source");
    let mu2 = mu2_union.expect("at least one source");

    // l_d_s: mean over sources
    let n_src = l_d_s_terms.len();
    let mut l_d_s = l_d_s_terms[0];
    for term in l_d_s_terms.iter().skip(1) {
        l_d_s = tape.add(l_d_s, *term);
    }
    let l_d_s = tape.scale(l_d_s, 1.0 / n_src as f64);

    // stationary-pixel mask from plain photometric maps (no gradient)
    let weights = cfg.weights;
    let mask = match fixed_mask {
        Some(m) => m.clone(),
        None => {
            let mu1 = crate::losses::automask_mu1(
                &sample.target.pixels,
                &warped_raw_values,
                &sample
                    .sources
                    .iter()
                    .map(|s| s.pixels.clone())
                    .collect::<Vec<_>>(),
                &weights,
            )
            .expect("sources verified non-empty");
            AutoMask::new(mu1, mu2)
        }
    };
    let coverage = mask.coverage();

    let parts = TotalLossVars {
        l_d_t,
        l_d_s,
        l_a_map,
        l_r_map,
        l_es,
    };
    let (total, l_a, l_r) = total_loss_vars(tape, &parts, &mask, &weights);
    SampleLoss {
        total,
        l_d_t: tape.scalar_value(l_d_t),
        l_d_s: tape.scalar_value(l_d_s),
        l_a: tape.scalar_value(l_a),
        l_r: tape.scalar_value(l_r),
        l_es: tape.scalar_value(l_es),
        coverage,
        mask,
    }
}

/// Total loss of one sample under the given parameters; the reference path
/// for finite-difference probes of the trainer.
pub fn sample_loss_value(
    store: &ParamStore,
    cfg: &TrainConfig,
    cam: &CameraModel,
    sample: &TrainSample,
) -> f64 {
    let mut tape = Tape::new();
    let bind = Bindings::bind(&mut tape, store);
    let loss = build_sample_loss(&mut tape, &bind, sample, cfg, cam);
    tape.scalar_value(loss.total)
}

/// As [`sample_loss_value`] with the auto-mask pinned, isolating the smooth
/// part of the objective.
pub fn sample_loss_value_fixed_mask(
    store: &ParamStore,
    cfg: &TrainConfig,
    cam: &CameraModel,
    sample: &TrainSample,
    mask: &AutoMask,
) -> f64 {
    let mut tape = Tape::new();
    let bind = Bindings::bind(&mut tape, store);
    let loss = build_sample_loss_with(&mut tape, &bind, sample, cfg, cam, Some(mask));
    tape.scalar_value(loss.total)
}

/// The auto-mask the objective would use for a sample under the given
/// parameters.
pub fn sample_auto_mask(
    store: &ParamStore,
    cfg: &TrainConfig,
    cam: &CameraModel,
    sample: &TrainSample,
) -> AutoMask {
    let mut tape = Tape::new();
    let bind = Bindings::bind(&mut tape, store);
    let loss = build_sample_loss(&mut tape, &bind, sample, cfg, cam);
    let _ = tape.scalar_value(loss.total);
    loss.mask
}

/// One optimization step over a batch of samples. Gradients are averaged
/// over the batch; a non-finite total aborts with the offending step.
pub fn train_step(
    state: &mut TrainState,
    batch: &[TrainSample],
    lr: f64,
) -> Result<StepRecord> {
    assert!(!batch.is_empty(), "empty batch");
    let names: Vec<String> = state.store.names().map(String::from).collect();
    let mut grad_acc: Vec<ArrayD<f64>> = state
        .store
        .iter()
        .map(|(_, p)| ArrayD::zeros(p.raw_dim()))
        .collect();
    let mut sums = StepRecord {
        step: state.step + 1,
        total: 0.0,
        l_d_t: 0.0,
        l_d_s: 0.0,
        l_a: 0.0,
        l_r: 0.0,
        l_es: 0.0,
        mask_coverage: 0.0,
    };
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let mut tape = Tape::new();
        let bind = Bindings::bind(&mut tape, &state.store);
        let loss = build_sample_loss(&mut tape, &bind, sample, &state.cfg, &state.cam);
        let total = tape.scalar_value(loss.total);
        if !total.is_finite() {
            return Err(ShadesError::NonFiniteLoss {
                step: state.step + 1,
                detail: format!(
                    "total={total}, l_d_t={}, l_d_s={}, l_es={}",
                    loss.l_d_t, loss.l_d_s, loss.l_es
                ),
            });
        }
        let grads = tape.backward(loss.total);
        for (k, name) in names.iter().enumerate() {
            if let Some(g) = grads.get(bind.var(name)) {
                grad_acc[k].scaled_add(scale, g);
            }
        }
        sums.total += total * scale;
        sums.l_d_t += loss.l_d_t * scale;
        sums.l_d_s += loss.l_d_s * scale;
        sums.l_a += loss.l_a * scale;
        sums.l_r += loss.l_r * scale;
        sums.l_es += loss.l_es * scale;
        sums.mask_coverage += loss.coverage * scale;
    }
    state.adam.update(&mut state.store, &grad_acc, lr);
    state.step += 1;
    Ok(sums)
}

/// Artifacts of a finished (or aborted) training run.
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn horizontal_flip_image(img: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((h, w, c), |(i, j, k)| img[[i, w - 1 - j, k]])
}

fn flip_sample(sample: &TrainSample) -> TrainSample {
    let flip_frame = |f: &Frame| Frame {
        pixels: horizontal_flip_image(&f.pixels),
        seq_id: f.seq_id.clone(),
        index: f.index,
    };
    TrainSample {
        target: flip_frame(&sample.target),
        sources: sample.sources.iter().map(flip_frame).collect(),
        target_rem: horizontal_flip_image(&sample.target_rem),
        source_rems: sample.source_rems.iter().map(horizontal_flip_image).collect(),
    }
}

/// Run the full schedule: seeded shuffling, fixed batches (the last partial
/// batch is dropped), the step-decay learning rate, per-epoch checkpoints
/// under `out_dir/checkpoints/epoch_N`, and `out_dir/log.csv`.
pub fn train_loop(
    samples: &[TrainSample],
    cfg: &TrainConfig,
    cam: &CameraModel,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(ShadesError::InsufficientFrames { got: 0 });
    }
    let mut state = TrainState::new(cfg.clone(), cam.clone())?;
    let mut records: Vec<StepRecord> = Vec::new();
    let mut checkpoints = Vec::new();
    let mut rng = StdRng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    // learning rate halves at three quarters of the schedule
    let decay_epoch = (cfg.epochs * 3).div_ceil(4);

    let flush_log = |records: &[StepRecord]| -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            let mut text = String::from(StepRecord::csv_header());
            text.push('\n');
            for r in records {
                text.push_str(&r.to_csv_row());
                text.push('\n');
            }
            crate::io::atomic_save(&dir.join("log.csv"), |tmp| {
                std::fs::write(tmp, &text).map_err(Into::into)
            })?;
        }
        Ok(())
    };

    for epoch in 1..=cfg.epochs {
        let lr = if epoch > decay_epoch {
            cfg.learning_rate * 0.5
        } else {
            cfg.learning_rate
        };
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < cfg.batch_size {
                continue; // drop the last partial batch
            }
            let batch: Vec<TrainSample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.flip_augmentation && rng.gen_bool(0.5) {
                        flip_sample(&samples[i])
                    } else {
                        samples[i].clone()
                    }
                })
                .collect();
            match train_step(&mut state, &batch, lr) {
                Ok(record) => records.push(record),
                Err(e) => {
                    flush_log(&records)?;
                    return Err(e);
                }
            }
        }
        if let Some(dir) = out_dir {
            let ckpt_dir = dir.join("checkpoints");
            std::fs::create_dir_all(&ckpt_dir)?;
            let path = ckpt_dir.join(format!("epoch_{epoch}"));
            let meta = CheckpointMeta {
                net: cfg.net,
                seed: cfg.seed,
                step: state.step,
            };
            save_checkpoint(&path, &state.store, &meta)?;
            checkpoints.push(path);
        }
    }
    flush_log(&records)?;
    Ok(TrainOutcome {
        state,
        records,
        checkpoints,
    })
}

/// Build training samples for one preprocessed sequence by reading the
/// prior cache next to its directory.
pub fn samples_from_sequence_dir(
    seq_dir: &Path,
    frames: &[Frame],
    gaps: &[i64],
) -> Result<Vec<TrainSample>> {
    let cache = crate::specular::PriorCache::for_sequence_dir(seq_dir);
    let mut rems = Vec::with_capacity(frames.len());
    for frame in frames {
        let (rem, _mask) = cache.load(frame)?;
        rems.push(rem);
    }
    build_samples(frames, &rems, gaps)
}
