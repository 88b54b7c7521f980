//! Trainable networks: a U-shaped depth network with a sigmoid disparity
//! head, a convolutional pose regressor on channel-concatenated frame pairs,
//! and a shared-encoder decomposition network with albedo and shading heads.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical names; forward
//! passes bind the store onto a tape and are pure functions of (params,
//! input).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ShadesError};
use crate::ingest::Frame;
use crate::tape::{Tape, VarId};
use crate::util::{chw_to_hwc, hwc_to_chw};
use crate::warp::{DepthMap, PoseSE3};

/// Bounded inverse-depth emitted by the depth head, values in (0, 1).
#[derive(Debug, Clone)]
pub struct DisparityMap {
    pub disp: Array2<f64>,
}

/// Axis-angle plus translation, the raw pose head output.
#[derive(Debug, Clone, Copy)]
pub struct PoseVector {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

/// Albedo in (0,1) per channel and single-channel shading in (0, s_max).
#[derive(Debug, Clone)]
pub struct DecompositionOutput {
    pub albedo: Array3<f64>,
    pub shading: Array2<f64>,
}

impl DecompositionOutput {
    /// The reconstruction `A * S` with shading broadcast over channels.
    pub fn reconstruction(&self) -> Array3<f64> {
        let (h, w, _) = self.albedo.dim();
        Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
            self.albedo[[i, j, c]] * self.shading[[i, j]]
        })
    }
}

/// Architecture and head-range settings shared by all three networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_size: usize,
    pub base_width: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub s_max: f64,
    pub pose_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_size: 288,
            base_width: 16,
            d_min: 0.1,
            d_max: 100.0,
            s_max: 2.0,
            pose_scale: 0.01,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.input_size.is_multiple_of(16) || self.input_size < 16 {
            return Err(ShadesError::InvalidConfig(
                "input_size must be a positive multiple of 16 (four stride-2 stages)".into(),
            ));
        }
        if self.base_width == 0 {
            return Err(ShadesError::InvalidConfig("base_width must be >= 1".into()));
        }
        if self.d_min.is_nan() || self.d_max.is_nan() || self.d_min <= 0.0 || self.d_min >= self.d_max
        {
            return Err(ShadesError::InvalidConfig("need 0 < d_min < d_max".into()));
        }
        if self.s_max.is_nan() || self.s_max <= 0.0 {
            return Err(ShadesError::InvalidConfig("s_max must be > 0".into()));
        }
        Ok(())
    }
}

/// Named parameter arrays in a stable insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self.values[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        &mut self.values[self.index[name]]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }
}

/// Parameters bound onto a tape for one forward/backward pass.
pub struct Bindings {
    vars: HashMap<String, VarId>,
}

impl Bindings {
    pub fn bind(tape: &mut Tape, store: &ParamStore) -> Self {
        let mut vars = HashMap::new();
        for (name, value) in store.iter() {
            vars.insert(name.to_string(), tape.leaf(value.clone()));
        }
        Self { vars }
    }

    pub fn var(&self, name: &str) -> VarId {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, VarId)> {
        self.vars.iter().map(|(n, &v)| (n.as_str(), v))
    }
}

// ---- layer registration and initialization ----

struct LayerSpec {
    name: String,
    weight_shape: Vec<usize>,
    bias_len: usize,
}

fn conv_spec(name: &str, cin: usize, cout: usize, k: usize) -> LayerSpec {
    LayerSpec {
        name: name.to_string(),
        weight_shape: vec![cout, cin, k, k],
        bias_len: cout,
    }
}

fn encoder_specs(prefix: &str, in_ch: usize, w: usize) -> Vec<LayerSpec> {
    vec![
        conv_spec(&format!("{prefix}.enc1"), in_ch, w, 3),
        conv_spec(&format!("{prefix}.enc2"), w, 2 * w, 3),
        conv_spec(&format!("{prefix}.enc3"), 2 * w, 4 * w, 3),
        conv_spec(&format!("{prefix}.enc4"), 4 * w, 8 * w, 3),
    ]
}

fn decoder_specs(prefix: &str, w: usize, head_out: usize) -> Vec<LayerSpec> {
    vec![
        conv_spec(&format!("{prefix}.dec3"), 8 * w + 4 * w, 4 * w, 3),
        conv_spec(&format!("{prefix}.dec2"), 4 * w + 2 * w, 2 * w, 3),
        conv_spec(&format!("{prefix}.dec1"), 2 * w + w, w, 3),
        conv_spec(&format!("{prefix}.dec0"), w, w, 3),
        conv_spec(&format!("{prefix}.head"), w, head_out, 3),
    ]
}

fn all_specs(cfg: &NetConfig) -> Vec<LayerSpec> {
    let w = cfg.base_width;
    let mut specs = Vec::new();
    specs.extend(encoder_specs("depth", 3, w));
    specs.extend(decoder_specs("depth", w, 1));
    specs.extend(encoder_specs("decomp", 3, w));
    specs.extend(decoder_specs("decomp.albedo", w, 3));
    specs.extend(decoder_specs("decomp.shading", w, 1));
    specs.extend(encoder_specs("pose", 6, w));
    specs.push(LayerSpec {
        name: "pose.fc".to_string(),
        weight_shape: vec![6, 8 * w],
        bias_len: 6,
    });
    specs
}

/// Seeded parameter initialization: uniform with 1/sqrt(fan_in) limits,
/// zero biases. The draw order is the registration order, so a (config,
/// seed) pair fully determines the store.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    for spec in all_specs(cfg) {
        let fan_in: usize = spec.weight_shape[1..].iter().product();
        let limit = (1.0 / fan_in as f64).sqrt();
        let weight = ArrayD::from_shape_simple_fn(IxDyn(&spec.weight_shape), || {
            rng.gen_range(-limit..limit)
        });
        store.insert(format!("{}.w", spec.name), weight);
        store.insert(
            format!("{}.b", spec.name),
            ArrayD::zeros(IxDyn(&[spec.bias_len])),
        );
    }
    Ok(store)
}

// ---- forward passes (tape level) ----

fn conv_elu(tape: &mut Tape, bind: &Bindings, name: &str, x: VarId, stride: usize) -> VarId {
    let w = bind.var(&format!("{name}.w"));
    let b = bind.var(&format!("{name}.b"));
    let y = tape.conv2d(x, w, b, stride, 1);
    tape.elu(y)
}

fn conv_plain(tape: &mut Tape, bind: &Bindings, name: &str, x: VarId) -> VarId {
    let w = bind.var(&format!("{name}.w"));
    let b = bind.var(&format!("{name}.b"));
    tape.conv2d(x, w, b, 1, 1)
}

fn encoder_forward(
    tape: &mut Tape,
    bind: &Bindings,
    prefix: &str,
    x: VarId,
) -> [VarId; 4] {
    let e1 = conv_elu(tape, bind, &format!("{prefix}.enc1"), x, 2);
    let e2 = conv_elu(tape, bind, &format!("{prefix}.enc2"), e1, 2);
    let e3 = conv_elu(tape, bind, &format!("{prefix}.enc3"), e2, 2);
    let e4 = conv_elu(tape, bind, &format!("{prefix}.enc4"), e3, 2);
    [e1, e2, e3, e4]
}

fn decoder_forward(
    tape: &mut Tape,
    bind: &Bindings,
    prefix: &str,
    enc: &[VarId; 4],
) -> VarId {
    let up4 = tape.upsample2x(enc[3]);
    let c3 = tape.concat_channels(up4, enc[2]);
    let d3 = conv_elu(tape, bind, &format!("{prefix}.dec3"), c3, 1);
    let up3 = tape.upsample2x(d3);
    let c2 = tape.concat_channels(up3, enc[1]);
    let d2 = conv_elu(tape, bind, &format!("{prefix}.dec2"), c2, 1);
    let up2 = tape.upsample2x(d2);
    let c1 = tape.concat_channels(up2, enc[0]);
    let d1 = conv_elu(tape, bind, &format!("{prefix}.dec1"), c1, 1);
    let up1 = tape.upsample2x(d1);
    let d0 = conv_elu(tape, bind, &format!("{prefix}.dec0"), up1, 1);
    conv_plain(tape, bind, &format!("{prefix}.head"), d0)
}

/// Depth network: U-shaped encoder-decoder with skip connections and a
/// sigmoid disparity head. Input `[3,H,W]`, output `[H,W]` in (0, 1).
pub fn depth_forward_vars(tape: &mut Tape, bind: &Bindings, frame_chw: VarId) -> VarId {
    let enc = encoder_forward(tape, bind, "depth", frame_chw);
    let logits = decoder_forward(tape, bind, "depth", &enc);
    let disp = tape.sigmoid(logits);
    tape.mean_channels(disp) // [1,H,W] -> [H,W]
}

/// Decomposition network: shared encoder, albedo decoder (3-channel
/// sigmoid), shading decoder (1 channel squashed into (0, s_max)).
/// Returns (albedo `[3,H,W]`, shading `[1,H,W]`).
pub fn decompose_forward_vars(
    tape: &mut Tape,
    bind: &Bindings,
    frame_chw: VarId,
    s_max: f64,
) -> (VarId, VarId) {
    let enc = encoder_forward(tape, bind, "decomp", frame_chw);
    let albedo_logits = decoder_forward(tape, bind, "decomp.albedo", &enc);
    let albedo = tape.sigmoid(albedo_logits);
    let shading_logits = decoder_forward(tape, bind, "decomp.shading", &enc);
    // softplus squashed through tanh: positive, strictly below s_max
    let sp = tape.softplus(shading_logits);
    let scaled = tape.scale(sp, 1.0 / s_max);
    let squashed = tape.tanh(scaled);
    let shading = tape.scale(squashed, s_max);
    (albedo, shading)
}

/// Pose network: channel-concatenated pair through the convolutional
/// encoder, global average pooling, and a dense layer to 6 outputs
/// (axis-angle then translation), scaled by the small-motion prior.
pub fn pose_forward_vars(
    tape: &mut Tape,
    bind: &Bindings,
    target_chw: VarId,
    source_chw: VarId,
    pose_scale: f64,
) -> VarId {
    let pair = tape.concat_channels(target_chw, source_chw);
    let enc = encoder_forward(tape, bind, "pose", pair);
    let pooled = tape.global_avg_pool(enc[3]);
    let w = bind.var("pose.fc.w");
    let b = bind.var("pose.fc.b");
    let six = tape.linear(w, pooled, b);
    tape.scale(six, pose_scale)
}

/// Bounded disparity-to-depth mapping on tape:
/// `depth = 1 / (1/d_max + (1/d_min - 1/d_max) disp)`.
pub fn disp_to_depth_vars(tape: &mut Tape, disp: VarId, d_min: f64, d_max: f64) -> VarId {
    let lo = 1.0 / d_max;
    let span = 1.0 / d_min - 1.0 / d_max;
    let scaled = tape.scale(disp, span);
    let inv = tape.add_const(scaled, lo);
    let ones = tape.scalar(1.0);
    tape.div(ones, inv)
}

// ---- plain wrappers ----

fn frame_leaf(tape: &mut Tape, frame: &Frame, cfg: &NetConfig) -> Result<VarId> {
    if frame.height() != cfg.input_size || frame.width() != cfg.input_size {
        return Err(ShadesError::InvalidInput(format!(
            "frame is {}x{}, networks are configured for {}x{}",
            frame.height(),
            frame.width(),
            cfg.input_size,
            cfg.input_size
        )));
    }
    Ok(tape.leaf(hwc_to_chw(&frame.pixels)))
}

/// Run the depth network on one frame.
pub fn depth_forward(frame: &Frame, store: &ParamStore, cfg: &NetConfig) -> Result<DisparityMap> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let x = frame_leaf(&mut tape, frame, cfg)?;
    let bind = Bindings::bind(&mut tape, store);
    let disp = depth_forward_vars(&mut tape, &bind, x);
    let v = tape.value(disp);
    Ok(DisparityMap {
        disp: Array2::from_shape_fn((v.shape()[0], v.shape()[1]), |(i, j)| v[[i, j]]),
    })
}

/// Convert bounded disparity to depth in `(d_min, d_max)`.
pub fn disp_to_depth(disp: &DisparityMap, d_min: f64, d_max: f64) -> Result<DepthMap> {
    if !(d_min > 0.0 && d_min < d_max) {
        return Err(ShadesError::InvalidConfig("need 0 < d_min < d_max".into()));
    }
    let lo = 1.0 / d_max;
    let span = 1.0 / d_min - 1.0 / d_max;
    DepthMap::new(disp.disp.mapv(|d| 1.0 / (lo + span * d)))
}

/// Run the pose network on a (target, source) pair.
pub fn pose_forward(
    frame_t: &Frame,
    frame_s: &Frame,
    store: &ParamStore,
    cfg: &NetConfig,
) -> Result<PoseVector> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let t = frame_leaf(&mut tape, frame_t, cfg)?;
    let s = frame_leaf(&mut tape, frame_s, cfg)?;
    let bind = Bindings::bind(&mut tape, store);
    let six = pose_forward_vars(&mut tape, &bind, t, s, cfg.pose_scale);
    let v = tape.value(six);
    Ok(PoseVector {
        axis_angle: [v[[0]], v[[1]], v[[2]]],
        translation: [v[[3]], v[[4]], v[[5]]],
    })
}

/// Run the decomposition network on one frame.
pub fn decompose_forward(
    frame: &Frame,
    store: &ParamStore,
    cfg: &NetConfig,
) -> Result<DecompositionOutput> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let x = frame_leaf(&mut tape, frame, cfg)?;
    let bind = Bindings::bind(&mut tape, store);
    let (albedo, shading) = decompose_forward_vars(&mut tape, &bind, x, cfg.s_max);
    let a = chw_to_hwc(tape.value(albedo));
    let s = tape.value(shading);
    Ok(DecompositionOutput {
        albedo: a,
        shading: Array2::from_shape_fn((s.shape()[1], s.shape()[2]), |(i, j)| s[[0, i, j]]),
    })
}

/// Rodrigues' exponential map. Axis-angle vectors with angle >= pi are
/// wrapped to the equivalent rotation with angle < pi first.
pub fn pose_vec_to_se3(v: &PoseVector) -> PoseSE3 {
    let [mut wx, mut wy, mut wz] = v.axis_angle;
    let theta = (wx * wx + wy * wy + wz * wz).sqrt();
    if theta >= std::f64::consts::PI {
        // rotation angle is periodic in 2*pi; map into (-pi, pi]
        let wrapped = theta.rem_euclid(2.0 * std::f64::consts::PI);
        let wrapped = if wrapped > std::f64::consts::PI {
            wrapped - 2.0 * std::f64::consts::PI
        } else {
            wrapped
        };
        let scale = wrapped / theta;
        wx *= scale;
        wy *= scale;
        wz *= scale;
    }
    let theta2 = wx * wx + wy * wy + wz * wz;
    let (a, b) = if theta2 < 1e-12 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let rotation = [
        [
            1.0 + b * (wx * wx - theta2),
            b * wx * wy - a * wz,
            b * wx * wz + a * wy,
        ],
        [
            b * wx * wy + a * wz,
            1.0 + b * (wy * wy - theta2),
            b * wy * wz - a * wx,
        ],
        [
            b * wx * wz - a * wy,
            b * wy * wz + a * wx,
            1.0 + b * (wz * wz - theta2),
        ],
    ];
    PoseSE3 {
        rotation,
        translation: v.translation,
    }
}

// ---- checkpointing ----

const CHECKPOINT_MAGIC: &[u8; 8] = b"SHCKPT01";

/// Architecture, seed, and progress metadata stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net: NetConfig,
    pub seed: u64,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
}

/// Write a single-file archive: magic, JSON manifest, then the raw
/// little-endian f64 arrays in manifest order.
pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let manifest = Manifest {
        meta: meta.clone(),
        params: store
            .iter()
            .map(|(name, value)| ParamEntry {
                name: name.to_string(),
                shape: value.shape().to_vec(),
            })
            .collect(),
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| ShadesError::CheckpointError(e.to_string()))?;
    crate::io::atomic_save(path, |tmp| {
        let mut f = std::fs::File::create(tmp)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
        f.write_all(&manifest_json)?;
        for (_, value) in store.iter() {
            for v in value.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    })
}

/// Read a checkpoint archive back into a store and its metadata.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let corrupt = |m: &str| ShadesError::CheckpointError(format!("{}: {m}", path.display()));
    let mut f = std::fs::File::open(path)
        .map_err(|e| ShadesError::CheckpointError(format!("{}: {e}", path.display())))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)
        .map_err(|_| corrupt("truncated manifest length"))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    if manifest_len > 64 * 1024 * 1024 {
        return Err(corrupt("implausible manifest size"));
    }
    let mut manifest_json = vec![0u8; manifest_len];
    f.read_exact(&mut manifest_json)
        .map_err(|_| corrupt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_json)
        .map_err(|e| corrupt(&format!("bad manifest: {e}")))?;
    let mut store = ParamStore::default();
    for entry in &manifest.params {
        let count: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; count * 8];
        f.read_exact(&mut bytes)
            .map_err(|_| corrupt(&format!("truncated data for {}", entry.name)))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| corrupt(&format!("bad shape for {}: {e}", entry.name)))?;
        store.insert(entry.name.clone(), array);
    }
    Ok((store, manifest.meta))
}
