//! Optimization: learning-rate schedule, the adaptive-moment optimizer,
//! parameter averaging, checkpointing, and the real/virtual training loop.
//!
//! One epoch is one real-view step — 2048 rays from a single frame — plus
//! however many virtual-view steps the fractional accumulator releases at
//! `virtual_ratio` per epoch. Training has two phases: during the first
//! `e_warm` epochs virtual views render at the warm-up resolution, draw
//! diffusion timesteps from the wide range, and leave the deformation and
//! topology networks untouched; afterwards the resolution doubles, the
//! timestep range narrows, and every parameter trains.
//!
//! # Determinism
//!
//! All randomness comes from one counter-based RNG seeded by the config.
//! Per epoch the draw order is: one draw for the frame pick, one per
//! sampled pixel, then the real plan's draws (one jitter per ray, one angle
//! per smoothness probe), then per virtual step the virtual plan's draws
//! followed by the noise draws of the distillation term. The RNG state is
//! checkpointed, so a resumed run replays the identical stream and matches
//! an uninterrupted one bit for bit.

use std::fs;
use std::io::{BufWriter, Read, Write as IoWrite};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{GradStore, ParamId, ParamStore};
use crate::dataio::{Dataset, Frame};
use crate::encoding::bandwidth_ratio;
use crate::error::{Error, Result};
use crate::fields::{ModelConfig, SceneModel};
use crate::geometry::{generate_rays, zdepth_factor, Intrinsics, RigidPose, ViewBounds};
use crate::losses::{
    plan_real_batch, plan_virtual_batch, real_loss_chunks, virtual_loss_chunks, LossReport,
    LossWeights, RealObs, TruncationConfig, VirtualViewConfig,
};
use crate::prior::{Denoiser, KeyframeCache, LatentCodec, NoiseSchedule};
use crate::render::{OccupancyGrid, RenderConfig};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Optimizer settings. Feature grids (hash tables, temporal codes) use the
/// much smaller epsilon customary for hash encodings; dense MLP layers use
/// the conventional one.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps_mlp: f64,
    pub eps_grid: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps_mlp: 1e-8, eps_grid: 1e-15 }
    }
}

/// Full training configuration. Every field has a default, so a TOML config
/// file may set any subset; [`TrainConfig::to_toml_string`] prints the
/// effective values.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    /// Total epochs.
    pub e_max: usize,
    /// Warm-up epochs (half of which hold the initial learning rate).
    pub e_warm: usize,
    /// Initial learning rate μ₁.
    pub lr_init: f64,
    /// Peak learning rate μ₂ reached at the end of warm-up.
    pub lr_peak: f64,
    /// Cosine floor as a fraction of the peak.
    pub lr_floor: f64,
    /// Rays per real-view batch.
    pub rays_per_batch: usize,
    /// Virtual steps per real step (fractional; accumulated across epochs).
    pub virtual_ratio: f64,
    /// Virtual render resolution during warm-up.
    pub virtual_res_warm: usize,
    /// Virtual render resolution afterwards.
    pub virtual_res_main: usize,
    /// Diffusion timestep range during warm-up, as schedule fractions.
    pub timestep_warm: [f64; 2],
    /// Diffusion timestep range afterwards.
    pub timestep_main: [f64; 2],
    /// Decay of the parameter shadow used for evaluation outputs.
    pub ema_decay: f64,
    /// RNG seed; everything else equal, the seed fixes the run bit-exactly.
    pub seed: u64,
    /// Classifier-free guidance scale forwarded to the denoiser.
    pub guidance: f64,
    /// Every k-th frame becomes a conditioning keyframe.
    pub keyframe_interval: usize,
    /// Normalized-time half-window of the temporal-code smoothness term.
    pub code_window: f64,
    /// Rays per tape chunk (memory/speed trade-off; no effect on values).
    pub chunk: usize,
    /// Occupancy-grid refresh cadence, in epochs.
    pub occupancy_refresh_every: usize,
    /// Checkpoint cadence, in epochs (0 = only the final checkpoint).
    pub checkpoint_every: usize,
    pub weights: LossWeights,
    pub truncation: TruncationConfig,
    pub virtual_view: VirtualViewConfig,
    pub render: RenderConfig,
    pub adam: AdamConfig,
    pub codec: LatentCodec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            e_max: 2000,
            e_warm: 200,
            lr_init: 5e-6,
            lr_peak: 5e-4,
            lr_floor: 0.05,
            rays_per_batch: 2048,
            virtual_ratio: 0.1,
            virtual_res_warm: 64,
            virtual_res_main: 128,
            timestep_warm: [0.02, 0.5],
            timestep_main: [0.02, 0.2],
            ema_decay: 0.95,
            seed: 0,
            guidance: 1.0,
            keyframe_interval: 10,
            code_window: 0.25,
            chunk: 4096,
            occupancy_refresh_every: 20,
            checkpoint_every: 500,
            weights: LossWeights::default(),
            truncation: TruncationConfig::default(),
            virtual_view: VirtualViewConfig::default(),
            render: RenderConfig::default(),
            adam: AdamConfig::default(),
            codec: LatentCodec::Identity,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.e_warm == 0 || self.e_warm >= self.e_max {
            return Err(Error::InvalidConfig(format!(
                "warm-up must fit inside the run (e_warm={}, e_max={})",
                self.e_warm, self.e_max
            )));
        }
        if !(self.lr_init > 0.0 && self.lr_peak > self.lr_init) {
            return Err(Error::InvalidConfig(format!(
                "learning rates must satisfy 0 < initial < peak (got {} and {})",
                self.lr_init, self.lr_peak
            )));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "learning-rate floor must be in (0, 1], got {}",
                self.lr_floor
            )));
        }
        if !(0.0..1.0).contains(&self.virtual_ratio) {
            return Err(Error::InvalidConfig(format!(
                "virtual ratio must be in [0, 1), got {}",
                self.virtual_ratio
            )));
        }
        for (name, r) in [("warm", self.timestep_warm), ("main", self.timestep_main)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1] < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} timestep range [{}, {}] must sit inside (0, 1)",
                    r[0], r[1]
                )));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig(format!(
                "EMA decay must be in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.rays_per_batch == 0
            || self.chunk == 0
            || self.virtual_res_warm == 0
            || self.virtual_res_main == 0
        {
            return Err(Error::InvalidConfig(
                "batch, chunk, and virtual resolutions must be positive".into(),
            ));
        }
        if self.keyframe_interval == 0 || self.occupancy_refresh_every == 0 {
            return Err(Error::InvalidConfig(
                "keyframe interval and occupancy cadence must be positive".into(),
            ));
        }
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "guidance must be a finite non-negative scale, got {}",
                self.guidance
            )));
        }
        self.weights.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(s).map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("config serialize: {e}")))
    }
}

/// Learning rate at (fractional) epoch `e`: flat at μ₁ through the first
/// half of warm-up, linear μ₁ → μ₂ through the second half, then cosine
/// from μ₂ down to `lr_floor·μ₂` at `e_max`. Continuous at both joints.
pub fn lr_schedule(e: f64, cfg: &TrainConfig) -> f64 {
    let half = cfg.e_warm as f64 / 2.0;
    let warm = cfg.e_warm as f64;
    if e <= half {
        cfg.lr_init
    } else if e <= warm {
        cfg.lr_init + (e - half) / half * (cfg.lr_peak - cfg.lr_init)
    } else {
        let t = (e - warm) / (cfg.e_max as f64 - warm);
        cfg.lr_peak
            * ((std::f64::consts::PI * t).cos() * (1.0 - cfg.lr_floor) / 2.0
                + (1.0 + cfg.lr_floor) / 2.0)
    }
}

/// Normalized frame time: frame `i` of `n` maps to `i/(n−1)`, a single
/// frame to `0`.
pub fn frame_time(index: usize, n_frames: usize) -> f64 {
    if n_frames <= 1 {
        0.0
    } else {
        index as f64 / (n_frames - 1) as f64
    }
}

/// Releases the whole virtual steps accumulated in `acc` after adding
/// `ratio` for the current epoch.
pub fn virtual_steps_due(acc: &mut f64, ratio: f64) -> usize {
    *acc += ratio;
    let due = acc.floor();
    *acc -= due;
    due as usize
}

// ---------------------------------------------------------------------------
// Optimizer and parameter shadow
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer over a [`ParamStore`], with per-block moment
/// buffers and per-block step counts. A frozen block skips its entire
/// update — parameters, moments, and step count — so freezing is exactly
/// "this step never happened" for that block, and the first step after
/// unfreezing is bias-corrected like a fresh first step.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
    grid: Vec<bool>,
}

impl Adam {
    pub fn new(params: &ParamStore, grid_ids: &[ParamId], cfg: AdamConfig) -> Self {
        let mut grid = vec![false; params.len()];
        for id in grid_ids {
            grid[id.0] = true;
        }
        Self {
            cfg,
            m: params.blocks().iter().map(|b| vec![0.0; b.data.len()]).collect(),
            v: params.blocks().iter().map(|b| vec![0.0; b.data.len()]).collect(),
            t: vec![0; params.len()],
            grid,
        }
    }

    /// One optimizer step. `frozen[b] = true` exempts block `b` entirely.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &GradStore,
        lr: f64,
        frozen: Option<&[bool]>,
    ) {
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        for (bi, block) in params.blocks_mut().iter_mut().enumerate() {
            if frozen.is_some_and(|f| f[bi]) {
                continue;
            }
            self.t[bi] += 1;
            let t = self.t[bi] as f64;
            let c1 = 1.0 - b1.powf(t);
            let c2 = 1.0 - b2.powf(t);
            let eps = if self.grid[bi] { self.cfg.eps_grid } else { self.cfg.eps_mlp };
            let g = grads.block(ParamId(bi));
            let m = &mut self.m[bi];
            let v = &mut self.v[bi];
            for i in 0..block.data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                block.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Exponentially averaged copy of the parameters, used for every
/// evaluation and rendering output; training itself reads the raw values.
#[derive(Debug, Clone)]
pub struct EmaShadow {
    pub decay: f64,
    blocks: Vec<Vec<f64>>,
}

impl EmaShadow {
    /// Starts the shadow at the parameters themselves, so the first update
    /// leaves it equal to them.
    pub fn new(params: &ParamStore, decay: f64) -> Self {
        Self { decay, blocks: params.blocks().iter().map(|b| b.data.clone()).collect() }
    }

    pub fn update(&mut self, params: &ParamStore) {
        let d = self.decay;
        for (shadow, block) in self.blocks.iter_mut().zip(params.blocks()) {
            for (s, &p) in shadow.iter_mut().zip(&block.data) {
                *s = d * *s + (1.0 - d) * p;
            }
        }
    }

    /// The shadow as a parameter store with the layout of `like`.
    pub fn materialize(&self, like: &ParamStore) -> ParamStore {
        let mut out = like.clone();
        for (block, shadow) in out.blocks_mut().iter_mut().zip(&self.blocks) {
            block.data.copy_from_slice(shadow);
        }
        out
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"WSDFCKP1";
const CKPT_VERSION: u32 = 1;

/// Captured state of the training RNG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// One named parameter block with its shadow and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct CkptBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub step: u64,
    pub data: Vec<f64>,
    pub ema: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Everything a resumed run needs: configs, counters, RNG state, occupancy
/// grid, and per-block parameters/shadow/moments. Binary on disk —
/// little-endian, magic + version header, named 64-bit float blocks —
/// written atomically (temp file, then rename).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub frames: usize,
    pub epoch: usize,
    pub virtual_acc: f64,
    pub rng: RngState,
    pub occ_res: usize,
    pub occ_bound: f64,
    pub occ_active: Vec<bool>,
    pub blocks: Vec<CkptBlock>,
}

/// Digest binding a checkpoint to its exact configuration (model, training,
/// frame count); resuming under any other configuration is refused.
pub fn config_hash(model_cfg: &ModelConfig, train_cfg: &TrainConfig, frames: usize) -> Result<[u8; 32]> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model_cfg)?);
    h.update([0u8]);
    h.update(serde_json::to_vec(train_cfg)?);
    h.update([0u8]);
    h.update(frames.to_le_bytes());
    Ok(h.finalize().into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(CKPT_MAGIC);
        w.write_u32::<LE>(CKPT_VERSION)?;
        w.extend_from_slice(&self.config_hash);
        let model_json = serde_json::to_vec(&self.model_cfg)?;
        let train_json = serde_json::to_vec(&self.train_cfg)?;
        w.write_u32::<LE>(model_json.len() as u32)?;
        w.extend_from_slice(&model_json);
        w.write_u32::<LE>(train_json.len() as u32)?;
        w.extend_from_slice(&train_json);
        w.write_u64::<LE>(self.frames as u64)?;
        w.write_u64::<LE>(self.epoch as u64)?;
        w.write_f64::<LE>(self.virtual_acc)?;
        w.extend_from_slice(&self.rng.seed);
        w.write_u64::<LE>(self.rng.stream)?;
        w.write_u64::<LE>(self.rng.word_pos as u64)?;
        w.write_u64::<LE>((self.rng.word_pos >> 64) as u64)?;
        w.write_u64::<LE>(self.occ_res as u64)?;
        w.write_f64::<LE>(self.occ_bound)?;
        let cells = self.occ_res.pow(3);
        if self.occ_active.len() != cells {
            return Err(Error::Checkpoint(format!(
                "occupancy mask has {} cells, expected {cells}",
                self.occ_active.len()
            )));
        }
        let mut byte = 0u8;
        for (i, &a) in self.occ_active.iter().enumerate() {
            if a {
                byte |= 1 << (i % 8);
            }
            if i % 8 == 7 || i + 1 == cells {
                w.push(byte);
                byte = 0;
            }
        }
        w.write_u32::<LE>(self.blocks.len() as u32)?;
        for b in &self.blocks {
            w.write_u32::<LE>(b.name.len() as u32)?;
            w.extend_from_slice(b.name.as_bytes());
            w.write_u64::<LE>(b.rows as u64)?;
            w.write_u64::<LE>(b.cols as u64)?;
            w.write_u64::<LE>(b.step)?;
            let n = b.rows * b.cols;
            for (what, buf) in [("data", &b.data), ("ema", &b.ema), ("m", &b.m), ("v", &b.v)] {
                if buf.len() != n {
                    return Err(Error::Checkpoint(format!(
                        "block {} {what} has {} values, expected {n}",
                        b.name,
                        buf.len()
                    )));
                }
                for &x in buf.iter() {
                    w.write_f64::<LE>(x)?;
                }
            }
        }
        Ok(w)
    }

    /// Writes atomically: the bytes land in a sibling temp file first, and
    /// the rename either installs the complete checkpoint or nothing.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn from_bytes(mut r: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| truncated())?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.read_u32::<LE>().map_err(|_| truncated())?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
            )));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash).map_err(|_| truncated())?;
        let model_cfg: ModelConfig = serde_json::from_slice(&read_bytes(&mut r)?)?;
        let train_cfg: TrainConfig = serde_json::from_slice(&read_bytes(&mut r)?)?;
        let frames = r.read_u64::<LE>().map_err(|_| truncated())? as usize;
        let epoch = r.read_u64::<LE>().map_err(|_| truncated())? as usize;
        let virtual_acc = r.read_f64::<LE>().map_err(|_| truncated())?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed).map_err(|_| truncated())?;
        let stream = r.read_u64::<LE>().map_err(|_| truncated())?;
        let lo = r.read_u64::<LE>().map_err(|_| truncated())?;
        let hi = r.read_u64::<LE>().map_err(|_| truncated())?;
        let rng = RngState { seed, stream, word_pos: (hi as u128) << 64 | lo as u128 };
        let occ_res = r.read_u64::<LE>().map_err(|_| truncated())? as usize;
        let occ_bound = r.read_f64::<LE>().map_err(|_| truncated())?;
        let cells = occ_res.pow(3);
        let mut packed = vec![0u8; cells.div_ceil(8)];
        r.read_exact(&mut packed).map_err(|_| truncated())?;
        let occ_active = (0..cells).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        let n_blocks = r.read_u32::<LE>().map_err(|_| truncated())?;
        let mut blocks = Vec::with_capacity(n_blocks as usize);
        for _ in 0..n_blocks {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
            let rows = r.read_u64::<LE>().map_err(|_| truncated())? as usize;
            let cols = r.read_u64::<LE>().map_err(|_| truncated())? as usize;
            let step = r.read_u64::<LE>().map_err(|_| truncated())?;
            let n = rows * cols;
            let mut bufs = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
            for buf in &mut bufs {
                buf.reserve(n);
                for _ in 0..n {
                    buf.push(r.read_f64::<LE>().map_err(|_| truncated())?);
                }
            }
            let [data, ema, m, v] = bufs;
            blocks.push(CkptBlock { name, rows, cols, step, data, ema, m, v });
        }
        Ok(Self {
            config_hash,
            model_cfg,
            train_cfg,
            frames,
            epoch,
            virtual_acc,
            rng,
            occ_res,
            occ_bound,
            occ_active,
            blocks,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model plus both parameter sets: the raw training
    /// values and the averaged shadow (the one evaluation should use).
    pub fn instantiate(&self) -> Result<(SceneModel, ParamStore, ParamStore)> {
        let trainer = Trainer::from_checkpoint(self)?;
        let ema = trainer.ema_params();
        Ok((trainer.model, trainer.params, ema))
    }
}

fn truncated() -> Error {
    Error::Checkpoint("checkpoint file is truncated".into())
}

fn read_bytes(r: &mut &[u8]) -> Result<Vec<u8>> {
    let len = r.read_u32::<LE>().map_err(|_| truncated())? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| truncated())?;
    Ok(buf)
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// All mutable training state plus the step procedures. Callers that want
/// the standard loop use [`run_training`]; the step methods are public for
/// custom loops and tests.
pub struct Trainer {
    pub model: SceneModel,
    pub params: ParamStore,
    pub ema: EmaShadow,
    pub adam: Adam,
    pub occ: OccupancyGrid,
    pub rng: ChaCha20Rng,
    pub epoch: usize,
    pub virtual_acc: f64,
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub frames: usize,
    warp_frozen: Vec<bool>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, frames: usize) -> Result<Self> {
        cfg.validate()?;
        if frames == 0 {
            return Err(Error::InvalidConfig("training needs at least one frame".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let model = SceneModel::new(model_cfg, frames, &mut params, &mut rng);
        let adam = Adam::new(&params, &model.grid_param_ids(), cfg.adam.clone());
        let ema = EmaShadow::new(&params, cfg.ema_decay);
        let occ = OccupancyGrid::new_full(cfg.render.occupancy_res, cfg.render.bound_radius);
        let mut warp_frozen = vec![false; params.len()];
        for id in model.warp_mlp_param_ids() {
            warp_frozen[id.0] = true;
        }
        Ok(Self {
            model,
            params,
            ema,
            adam,
            occ,
            rng,
            epoch: 0,
            virtual_acc: 0.0,
            model_cfg: model_cfg.clone(),
            cfg: cfg.clone(),
            frames,
            warp_frozen,
        })
    }

    /// Bandwidth fraction of the coarse-to-fine schedule at this epoch.
    pub fn ratio(&self) -> f64 {
        bandwidth_ratio(self.epoch, self.cfg.e_max)
    }

    pub fn lr(&self) -> f64 {
        lr_schedule(self.epoch as f64, &self.cfg)
    }

    /// Whether the current epoch is still in warm-up.
    pub fn warm(&self) -> bool {
        self.epoch < self.cfg.e_warm
    }

    /// Re-marks the occupancy grid from the current SDF over a small set of
    /// probe times spanning the sequence.
    pub fn refresh_occupancy(&mut self) {
        let k = self.cfg.render.occupancy_time_samples.max(1);
        let times: Vec<f64> =
            (0..k).map(|i| if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 }).collect();
        let ratio = bandwidth_ratio(self.epoch, self.cfg.e_max);
        self.occ.refresh(&self.model, &self.params, &times, ratio, &self.cfg.render, 1);
    }

    /// One real-view step: a mask-balanced pixel batch from `frame`,
    /// rendered and supervised by the observation losses, then one
    /// optimizer step and a shadow update.
    pub fn train_step_real(
        &mut self,
        frame: &Frame,
        intr: &Intrinsics,
        t_norm: f64,
    ) -> Result<LossReport> {
        let ratio = self.ratio();
        let picks = sample_balanced_pixels(&frame.mask, self.cfg.rays_per_batch, &mut self.rng);
        let mut pixels = Vec::with_capacity(picks.len());
        let mut rgb = Vec::with_capacity(picks.len() * 3);
        let mut depth = Vec::with_capacity(picks.len());
        let mut mask = Vec::with_capacity(picks.len());
        for &p in &picks {
            let (u, v) = ((p % intr.width) as f64 + 0.5, (p / intr.width) as f64 + 0.5);
            pixels.push((u, v));
            rgb.extend_from_slice(&frame.rgb[p * 3..p * 3 + 3]);
            // Stored depth is along the optical axis; supervision wants the
            // distance along the (unit) ray.
            let z = frame.depth[p];
            depth.push(if z > 0.0 { z * zdepth_factor(intr, u, v) } else { 0.0 });
            mask.push(if frame.mask[p] > 0.5 { 1.0 } else { 0.0 });
        }
        let rays = generate_rays(&frame.pose, intr, &pixels, self.cfg.render.bound_radius);
        let obs = RealObs { rays: &rays, rgb: &rgb, depth: &depth, mask: &mask };
        let rp = plan_real_batch(
            &self.model,
            &self.params,
            &obs,
            &self.occ,
            t_norm,
            ratio,
            &self.cfg.render,
            &self.cfg.truncation,
            self.cfg.code_window,
            &mut self.rng,
        );
        let mut grads = GradStore::zeros_like(&self.params);
        let report = real_loss_chunks(
            &self.model,
            &self.params,
            &rp,
            &self.cfg.weights,
            ratio,
            self.cfg.render.beta_floor,
            self.cfg.chunk,
            &mut grads,
        )?;
        let lr = self.lr();
        self.adam.step(&mut self.params, &grads, lr, None);
        self.ema.update(&self.params);
        Ok(report)
    }

    /// One virtual-view step: a random unobserved view rendered at the
    /// phase resolution and pulled toward the prior by score distillation,
    /// plus the canonical regularizers. During warm-up the deformation and
    /// topology networks are exempt from the update. A denoiser failure
    /// skips the step (returning `Ok(None)`) and training continues; a
    /// non-finite loss aborts.
    pub fn train_step_virtual(
        &mut self,
        bounds: &ViewBounds,
        kf: &KeyframeCache,
        schedule: &NoiseSchedule,
        denoiser: &dyn Denoiser,
        frame_idx: usize,
        t_norm: f64,
        ref_pose: &RigidPose,
    ) -> Result<Option<LossReport>> {
        let ratio = self.ratio();
        let warm = self.warm();
        let (res, t_range) = if warm {
            (self.cfg.virtual_res_warm, self.cfg.timestep_warm)
        } else {
            (self.cfg.virtual_res_main, self.cfg.timestep_main)
        };
        let vp = plan_virtual_batch(
            &self.model,
            &self.params,
            bounds,
            ref_pose,
            kf,
            schedule,
            frame_idx,
            t_norm,
            t_range,
            res,
            ratio,
            &self.occ,
            &self.cfg.render,
            &self.cfg.truncation,
            &self.cfg.virtual_view,
            &mut self.rng,
        )?;
        let mut grads = GradStore::zeros_like(&self.params);
        let report = match virtual_loss_chunks(
            &self.model,
            &self.params,
            &vp,
            kf,
            &self.cfg.codec,
            denoiser,
            schedule,
            self.cfg.guidance,
            &self.cfg.weights,
            ratio,
            self.cfg.render.beta_floor,
            self.cfg.chunk,
            &mut self.rng,
            &mut grads,
        ) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => return Err(e),
            Err(e) => {
                log::warn!("virtual step skipped (epoch {}): {e}", self.epoch);
                return Ok(None);
            }
        };
        let lr = self.lr();
        let frozen = warm.then_some(self.warp_frozen.as_slice());
        self.adam.step(&mut self.params, &grads, lr, frozen);
        self.ema.update(&self.params);
        Ok(Some(report))
    }

    /// The averaged parameters, for rendering and evaluation.
    pub fn ema_params(&self) -> ParamStore {
        self.ema.materialize(&self.params)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let blocks = self
            .params
            .blocks()
            .iter()
            .enumerate()
            .map(|(i, b)| CkptBlock {
                name: b.name.clone(),
                rows: b.rows,
                cols: b.cols,
                step: self.adam.t[i],
                data: b.data.clone(),
                ema: self.ema.blocks[i].clone(),
                m: self.adam.m[i].clone(),
                v: self.adam.v[i].clone(),
            })
            .collect();
        Ok(Checkpoint {
            config_hash: config_hash(&self.model_cfg, &self.cfg, self.frames)?,
            model_cfg: self.model_cfg.clone(),
            train_cfg: self.cfg.clone(),
            frames: self.frames,
            epoch: self.epoch,
            virtual_acc: self.virtual_acc,
            rng: RngState::capture(&self.rng),
            occ_res: self.occ.res,
            occ_bound: self.occ.bound,
            occ_active: self.occ.active_mask().to_vec(),
            blocks,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut trainer = Self::new(&ck.model_cfg, &ck.train_cfg, ck.frames)?;
        if ck.blocks.len() != trainer.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameter blocks, model has {}",
                ck.blocks.len(),
                trainer.params.len()
            )));
        }
        for b in &ck.blocks {
            let id = trainer.params.id_by_name(&b.name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint block {} is unknown to the model", b.name))
            })?;
            let block = trainer.params.block_mut(id);
            if block.rows != b.rows || block.cols != b.cols {
                return Err(Error::Checkpoint(format!(
                    "block {} is {}x{} in the checkpoint but {}x{} in the model",
                    b.name, b.rows, b.cols, block.rows, block.cols
                )));
            }
            block.data.copy_from_slice(&b.data);
            trainer.ema.blocks[id.0].copy_from_slice(&b.ema);
            trainer.adam.m[id.0].copy_from_slice(&b.m);
            trainer.adam.v[id.0].copy_from_slice(&b.v);
            trainer.adam.t[id.0] = b.step;
        }
        trainer.rng = ck.rng.restore();
        trainer.epoch = ck.epoch;
        trainer.virtual_acc = ck.virtual_acc;
        trainer.occ = OccupancyGrid::new_full(ck.occ_res, ck.occ_bound);
        trainer.occ.set_active_mask(ck.occ_active.clone())?;
        Ok(trainer)
    }
}

/// Mask-balanced pixel picks: when the frame has any foreground, half the
/// batch is drawn uniformly from foreground pixels and the rest uniformly
/// from the whole image; otherwise all picks are uniform. One RNG draw per
/// pick, in output order.
fn sample_balanced_pixels(mask: &[f64], n: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let fg: Vec<usize> =
        mask.iter().enumerate().filter(|&(_, &m)| m > 0.5).map(|(i, _)| i).collect();
    let n_fg = if fg.is_empty() { 0 } else { n / 2 };
    let mut picks = Vec::with_capacity(n);
    for i in 0..n {
        if i < n_fg {
            picks.push(fg[rng.gen_range(0..fg.len())]);
        } else {
            picks.push(rng.gen_range(0..mask.len()));
        }
    }
    picks
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

/// Virtual-camera bounds derived from the observed cameras: their radius
/// range (slightly widened), their polar range widened by 0.2 rad, and the
/// full azimuth circle — the whole point of the prior is the views the
/// orbit never reached.
pub fn virtual_bounds(dataset: &Dataset) -> Result<ViewBounds> {
    if dataset.frames.is_empty() {
        return Err(Error::InvalidConfig("dataset has no frames".into()));
    }
    let mut r = [f64::INFINITY, f64::NEG_INFINITY];
    let mut p = [f64::INFINITY, f64::NEG_INFINITY];
    for f in &dataset.frames {
        let t = &f.pose.translation;
        let radius = t.norm();
        let polar = (t.z / radius).clamp(-1.0, 1.0).acos();
        r = [r[0].min(radius), r[1].max(radius)];
        p = [p[0].min(polar), p[1].max(polar)];
    }
    Ok(ViewBounds {
        radius: [(r[0] * 0.95).max(1.05), r[1] * 1.05],
        polar: [(p[0] - 0.2).max(0.05), (p[1] + 0.2).min(std::f64::consts::PI - 0.05)],
        azimuth: [-std::f64::consts::PI, std::f64::consts::PI],
    })
}

/// Runs the full loop: per epoch one real step on a random frame, then the
/// virtual steps the ratio accumulator releases, with occupancy refreshes
/// and periodic checkpoints on their cadences. With `out_dir` set, per-step
/// loss lines are appended to `metrics.jsonl`, periodic checkpoints to
/// `ckpt_{epoch:06}.ckpt`, and the final state to `last.ckpt`. Passing
/// `resume` continues that checkpoint — the configs must hash identically —
/// and the result matches an uninterrupted run bit for bit.
pub fn run_training(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    denoiser: &dyn Denoiser,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let n_frames = dataset.frames.len();
    let mut trainer = match resume {
        Some(ck) => {
            let want = config_hash(model_cfg, cfg, n_frames)?;
            if want != ck.config_hash {
                return Err(Error::Checkpoint(
                    "checkpoint was produced under a different configuration".into(),
                ));
            }
            Trainer::from_checkpoint(ck)?
        }
        None => Trainer::new(model_cfg, cfg, n_frames)?,
    };
    let intr = &dataset.intrinsics;
    let images: Vec<Vec<f64>> = dataset.frames.iter().map(|f| f.rgb.clone()).collect();
    let kf = KeyframeCache::build(&images, intr.height, intr.width, cfg.keyframe_interval, &cfg.codec)?;
    let bounds = virtual_bounds(dataset)?;
    let schedule = NoiseSchedule::scaled_linear();

    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(
                fs::OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?,
            ))
        }
        None => None,
    };
    let log_line = |m: &mut Option<BufWriter<fs::File>>, v: serde_json::Value| -> Result<()> {
        if let Some(w) = m {
            writeln!(w, "{v}")?;
        }
        Ok(())
    };

    while trainer.epoch < cfg.e_max {
        if trainer.epoch % cfg.occupancy_refresh_every == 0 {
            trainer.refresh_occupancy();
            log::info!(
                "epoch {}: occupancy refreshed, {:.1}% active",
                trainer.epoch,
                trainer.occ.active_fraction() * 100.0
            );
        }
        let fpick = trainer.rng.gen_range(0..n_frames);
        let t_norm = frame_time(fpick, n_frames);
        let report = trainer.train_step_real(&dataset.frames[fpick], intr, t_norm)?;
        log_line(
            &mut metrics,
            serde_json::json!({
                "epoch": trainer.epoch, "kind": "real", "frame": fpick,
                "lr": trainer.lr(), "bandwidth": trainer.ratio(), "loss": report,
            }),
        )?;

        for _ in 0..virtual_steps_due(&mut trainer.virtual_acc, cfg.virtual_ratio) {
            let ref_pose = dataset.frames[kf.frames[kf.nearest(fpick)]].pose.clone();
            let line = match trainer.train_step_virtual(
                &bounds, &kf, &schedule, denoiser, fpick, t_norm, &ref_pose,
            )? {
                Some(r) => serde_json::json!({
                    "epoch": trainer.epoch, "kind": "virtual", "frame": fpick,
                    "lr": trainer.lr(), "bandwidth": trainer.ratio(), "loss": r,
                }),
                None => serde_json::json!({
                    "epoch": trainer.epoch, "kind": "virtual_skipped", "frame": fpick,
                }),
            };
            log_line(&mut metrics, line)?;
        }

        trainer.epoch += 1;
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0
                && trainer.epoch % cfg.checkpoint_every == 0
                && trainer.epoch < cfg.e_max
            {
                let path = dir.join(format!("ckpt_{:06}.ckpt", trainer.epoch));
                trainer.checkpoint()?.save(&path)?;
                log::info!("epoch {}: checkpoint written to {}", trainer.epoch, path.display());
            }
        }
    }
    if let Some(w) = &mut metrics {
        w.flush()?;
    }
    let ck = trainer.checkpoint()?;
    if let Some(dir) = out_dir {
        ck.save(&dir.join("last.ckpt"))?;
    }
    Ok(ck)
}
