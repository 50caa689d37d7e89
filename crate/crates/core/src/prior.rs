//! Score-distillation prior: noise schedule, denoiser abstraction, keyframe
//! conditioning, and the angle-modulated distillation gradient.
//!
//! The denoiser is pluggable behind [`Denoiser`]: an analytic toy
//! implementation ([`ToyDenoiser`]) for tests and desk-scale runs, and an
//! HTTP client ([`RemoteDenoiser`]) speaking the wire protocol in
//! [`protocol`]. Latents cross the denoiser boundary as little-endian `f32`
//! regardless of transport, so an in-process toy run and a remote toy run
//! see bit-identical inputs and produce bit-identical noise estimates.
//!
//! The distillation step is split in two passes to keep memory flat:
//! [`sds_latent_pass`] runs the forward-only half (noise draw, denoiser
//! call, gradient assembly in latent space); the caller then pulls the
//! returned per-element gradient back through the differentiable render as
//! a linear functional. See `losses` for the pullback.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::angular_distance;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::time::Duration;

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

/// Cumulative signal fraction ᾱ of a scaled-linear variance schedule,
/// queried at a continuous timestep `i ∈ [0,1]`.
///
/// The discrete schedule is the diffusion-standard "scaled linear" ramp:
/// per-step variances β interpolate between `√β_min` and `√β_max` and are
/// squared, `ᾱ_k = Π_{j≤k}(1-β_j)`, and `alpha_bar(i)` linearly interpolates
/// the table at `i·(steps-1)`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub const STEPS: usize = 1000;
    pub const BETA_MIN: f64 = 8.5e-4;
    pub const BETA_MAX: f64 = 1.2e-2;

    pub fn scaled_linear() -> Self {
        let (s0, s1) = (Self::BETA_MIN.sqrt(), Self::BETA_MAX.sqrt());
        let mut alpha_bar = Vec::with_capacity(Self::STEPS);
        let mut acc = 1.0;
        for k in 0..Self::STEPS {
            let s = s0 + (s1 - s0) * k as f64 / (Self::STEPS - 1) as f64;
            acc *= 1.0 - s * s;
            alpha_bar.push(acc);
        }
        Self { alpha_bar }
    }

    /// ᾱ at continuous `i ∈ [0,1]` (clamped), by linear interpolation of the
    /// discrete table at `i·(steps-1)`.
    pub fn alpha_bar(&self, i: f64) -> f64 {
        let x = i.clamp(0.0, 1.0) * (self.alpha_bar.len() - 1) as f64;
        let lo = (x.floor() as usize).min(self.alpha_bar.len() - 2);
        let w = x - lo as f64;
        (1.0 - w) * self.alpha_bar[lo] + w * self.alpha_bar[lo + 1]
    }
}

/// Forward noising `z̃ = √ᾱ·z + √(1-ᾱ)·ε`.
pub fn add_noise(z: &[f64], epsilon: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if z.len() != epsilon.len() {
        return Err(Error::ShapeMismatch(format!(
            "add_noise: z has {} elements, epsilon has {}",
            z.len(),
            epsilon.len()
        )));
    }
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(z.iter().zip(epsilon).map(|(&zv, &ev)| sa * zv + sn * ev).collect())
}

/// Analytic noise estimate that steers a noisy latent toward a known target:
/// `ε̂ = (z̃ - √ᾱ·z*)/√(1-ᾱ)`, so `ε̂ - ε = √ᾱ/√(1-ᾱ)·(z - z*)`. The
/// denominator is clamped at `1e-6` so `i → 0` stays finite.
pub fn toy_epsilon(z_tilde: &[f64], alpha_bar: f64, z_star: &[f64]) -> Vec<f64> {
    let sa = alpha_bar.sqrt();
    let denom = (1.0 - alpha_bar).max(1e-6).sqrt();
    z_tilde
        .iter()
        .zip(z_star)
        .map(|(&zt, &zs)| (zt - sa * zs) / denom)
        .collect()
}

/// View-dependent distillation weight `ŵ(i) = (1-ᾱ(i))·(exp(|ΔP|)-1)`,
/// where `|ΔP|` is the normalized angular distance between the reference and
/// virtual camera origins (0 for coincident views, 1 for antipodal ones).
pub fn sds_weight(
    schedule: &NoiseSchedule,
    i: f64,
    origin_ref: &Vector3<f64>,
    origin_virt: &Vector3<f64>,
) -> Result<f64> {
    let dist = angular_distance(origin_ref, origin_virt)?;
    Ok((1.0 - schedule.alpha_bar(i)) * angular_gain(dist))
}

/// The angular factor of the distillation weight, `exp(d)-1`.
pub fn angular_gain(angular_dist: f64) -> f64 {
    angular_dist.exp() - 1.0
}

// ---------------------------------------------------------------------------
// Latents and codecs
// ---------------------------------------------------------------------------

/// A denoiser-side tensor: channel-major `[c, h, w]`, 32-bit floats. This is
/// the exact precision that crosses the denoiser boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Latent {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "latent shape {shape:?} wants {} elements, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Rounds a double buffer to the wire precision.
pub fn quantize_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// Upcasts wire floats back to doubles (exact).
pub fn upcast_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// `[pixels, 3]` row-major → `[3, pixels]` channel-major.
pub fn pixel_to_channel_major(pm: &[f64], pixels: usize) -> Vec<f64> {
    let mut cm = vec![0.0; pixels * 3];
    for p in 0..pixels {
        for c in 0..3 {
            cm[c * pixels + p] = pm[p * 3 + c];
        }
    }
    cm
}

/// Inverse of [`pixel_to_channel_major`].
pub fn channel_to_pixel_major(cm: &[f64], pixels: usize) -> Vec<f64> {
    let mut pm = vec![0.0; pixels * 3];
    for p in 0..pixels {
        for c in 0..3 {
            pm[p * 3 + c] = cm[c * pixels + p];
        }
    }
    pm
}

/// Maps a rendered image to the denoiser's latent resolution.
///
/// `Identity` keeps the image as-is (the toy prior works in image space);
/// `Downsample` averages `factor × factor` pixel blocks for denoisers that
/// expect a smaller latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentCodec {
    Identity,
    Downsample { factor: usize },
}

impl LatentCodec {
    /// Latent spatial size for an `h × w` image.
    pub fn latent_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match *self {
            LatentCodec::Identity => Ok((h, w)),
            LatentCodec::Downsample { factor } => {
                if factor == 0 || h % factor != 0 || w % factor != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "downsample factor {factor} does not divide {h}x{w}"
                    )));
                }
                Ok((h / factor, w / factor))
            }
        }
    }

    /// Group index of every full-res pixel (row-major) into its latent
    /// pixel, for mean-pooling. Identity maps pixel `p` to group `p`.
    pub fn pixel_groups(&self, h: usize, w: usize) -> Result<Vec<u32>> {
        let (lh, lw) = self.latent_hw(h, w)?;
        let f = w / lw;
        let mut groups = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                groups.push(((y / f) * lw + x / f) as u32);
            }
        }
        let _ = lh;
        Ok(groups)
    }

    /// Encodes a row-major `[h·w, 3]` image into the pixel-major latent
    /// `[lh·lw, 3]` by block means (identity: a copy).
    pub fn encode_pm(&self, rgb: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
        match *self {
            LatentCodec::Identity => Ok(rgb.to_vec()),
            LatentCodec::Downsample { .. } => {
                let (lh, lw) = self.latent_hw(h, w)?;
                let groups = self.pixel_groups(h, w)?;
                let mut sums = vec![0.0; lh * lw * 3];
                let mut counts = vec![0.0; lh * lw];
                for (p, &g) in groups.iter().enumerate() {
                    for c in 0..3 {
                        sums[g as usize * 3 + c] += rgb[p * 3 + c];
                    }
                    counts[g as usize] += 1.0;
                }
                for g in 0..lh * lw {
                    for c in 0..3 {
                        sums[g * 3 + c] /= counts[g];
                    }
                }
                Ok(sums)
            }
        }
    }

    /// Tape counterpart of [`encode_pm`] (identical values).
    pub fn encode_tape(&self, tape: &mut Tape, rgb: Var, h: usize, w: usize) -> Result<Var> {
        match *self {
            LatentCodec::Identity => Ok(rgb),
            LatentCodec::Downsample { .. } => {
                let (lh, lw) = self.latent_hw(h, w)?;
                let groups = self.pixel_groups(h, w)?;
                Ok(tape.group_mean_rows(rgb, groups, lh * lw))
            }
        }
    }

    /// Decodes a pixel-major latent back to image resolution (nearest
    /// neighbor for the downsample codec). Identity round-trips exactly.
    pub fn decode_pm(&self, latent: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
        match *self {
            LatentCodec::Identity => Ok(latent.to_vec()),
            LatentCodec::Downsample { .. } => {
                let groups = self.pixel_groups(h, w)?;
                let mut rgb = vec![0.0; h * w * 3];
                for (p, &g) in groups.iter().enumerate() {
                    for c in 0..3 {
                        rgb[p * 3 + c] = latent[g as usize * 3 + c];
                    }
                }
                Ok(rgb)
            }
        }
    }

    /// Builds the wire latent (channel-major f32) from a row-major image.
    pub fn encode_latent(&self, rgb: &[f64], h: usize, w: usize) -> Result<Latent> {
        let (lh, lw) = self.latent_hw(h, w)?;
        let pm = self.encode_pm(rgb, h, w)?;
        let cm = pixel_to_channel_major(&pm, lh * lw);
        Latent::new([3, lh, lw], quantize_f32(&cm))
    }
}

// ---------------------------------------------------------------------------
// Denoisers
// ---------------------------------------------------------------------------

/// An ε-predictor conditioned on a reference view and the relative polar
/// pose of the rendered view. Implementations must be deterministic given
/// identical inputs and must return a latent of the input's shape.
pub trait Denoiser: Send + Sync {
    fn predict(
        &self,
        noisy: &Latent,
        timestep: f64,
        reference: &Latent,
        delta_pose: [f64; 3],
        guidance: f64,
    ) -> Result<Latent>;
}

/// One conditioning bucket of the toy prior: for requests whose reference
/// matches `reference` and whose relative pose is nearest `delta_pose`, the
/// denoiser steers toward `target`.
#[derive(Debug, Clone)]
pub struct ToyTarget {
    pub reference: Latent,
    pub delta_pose: [f64; 3],
    pub target: Latent,
}

/// The toy prior's conditioning table.
///
/// Selection is deterministic: first keep the entries whose reference latent
/// is (within `1e-9` of) nearest the request's reference in L2, then pick
/// the one whose `delta_pose` is nearest the request's; remaining ties go to
/// the earliest entry.
#[derive(Debug, Clone, Default)]
pub struct ToyTargetSet {
    pub entries: Vec<ToyTarget>,
}

impl ToyTargetSet {
    pub fn select(&self, reference: &Latent, delta_pose: [f64; 3]) -> Result<&ToyTarget> {
        if self.entries.is_empty() {
            return Err(Error::InvalidConfig("toy denoiser has no targets".into()));
        }
        let ref_dist = |e: &ToyTarget| -> f64 {
            if e.reference.shape != reference.shape {
                return f64::INFINITY;
            }
            e.reference
                .data
                .iter()
                .zip(&reference.data)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
        };
        let best_ref = self
            .entries
            .iter()
            .map(ref_dist)
            .fold(f64::INFINITY, f64::min);
        if !best_ref.is_finite() {
            return Err(Error::ShapeMismatch(
                "no toy target matches the reference latent shape".into(),
            ));
        }
        let mut best: Option<(&ToyTarget, f64)> = None;
        for e in &self.entries {
            if ref_dist(e) > best_ref + 1e-9 {
                continue;
            }
            let pd = e
                .delta_pose
                .iter()
                .zip(&delta_pose)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
            if best.map_or(true, |(_, b)| pd < b) {
                best = Some((e, pd));
            }
        }
        Ok(best.expect("nonempty entries").0)
    }
}

/// Serialized form of a toy target table (see [`protocol::TensorMsg`] for
/// the tensor encoding).
#[derive(Debug, Serialize, Deserialize)]
pub struct ToyTargetFile {
    pub version: u32,
    pub entries: Vec<ToyTargetEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ToyTargetEntry {
    pub reference: protocol::TensorMsg,
    pub delta_pose: [f64; 3],
    pub target: protocol::TensorMsg,
}

impl ToyTargetSet {
    pub fn to_json(&self) -> Result<String> {
        let entries = self
            .entries
            .iter()
            .map(|e| ToyTargetEntry {
                reference: protocol::TensorMsg::from_latent(&e.reference),
                delta_pose: e.delta_pose,
                target: protocol::TensorMsg::from_latent(&e.target),
            })
            .collect();
        Ok(serde_json::to_string_pretty(&ToyTargetFile { version: 1, entries })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ToyTargetFile = serde_json::from_str(s)?;
        if file.version != 1 {
            return Err(Error::Protocol(format!(
                "toy target file version {} (expected 1)",
                file.version
            )));
        }
        let entries = file
            .entries
            .into_iter()
            .map(|e| {
                Ok(ToyTarget {
                    reference: e.reference.to_latent()?,
                    delta_pose: e.delta_pose,
                    target: e.target.to_latent()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }
}

/// Analytic denoiser that pulls latents toward bucketed targets. Inputs are
/// already wire-precision (`f32`); arithmetic runs in `f64` and the result
/// is rounded back to `f32`, so a remote round-trip through
/// [`protocol::handle_denoise_json`] is bit-identical to a local call.
/// `guidance` is accepted for interface parity and ignored.
pub struct ToyDenoiser {
    pub schedule: NoiseSchedule,
    pub targets: ToyTargetSet,
}

impl ToyDenoiser {
    pub fn new(targets: ToyTargetSet) -> Self {
        Self { schedule: NoiseSchedule::scaled_linear(), targets }
    }
}

impl Denoiser for ToyDenoiser {
    fn predict(
        &self,
        noisy: &Latent,
        timestep: f64,
        reference: &Latent,
        delta_pose: [f64; 3],
        _guidance: f64,
    ) -> Result<Latent> {
        let target = self.targets.select(reference, delta_pose)?;
        if target.target.shape != noisy.shape {
            return Err(Error::ShapeMismatch(format!(
                "toy target shape {:?} vs latent {:?}",
                target.target.shape, noisy.shape
            )));
        }
        let ab = self.schedule.alpha_bar(timestep);
        let eps = toy_epsilon(
            &upcast_f64(&noisy.data),
            ab,
            &upcast_f64(&target.target.data),
        );
        Latent::new(noisy.shape, quantize_f32(&eps))
    }
}

// ---------------------------------------------------------------------------
// Keyframe cache
// ---------------------------------------------------------------------------

/// Reference frames for denoiser conditioning: every `interval`-th frame's
/// image and its latent, precomputed once.
pub struct KeyframeCache {
    pub interval: usize,
    /// Frame indices of the keyframes: 0, k, 2k, …
    pub frames: Vec<usize>,
    /// Reference images (row-major `[h·w, 3]`).
    pub images: Vec<Vec<f64>>,
    /// Precomputed latents, one per keyframe.
    pub latents: Vec<Latent>,
    /// How many encode calls the cache has performed (exactly one per
    /// keyframe for the life of the cache).
    pub encodes: usize,
}

impl KeyframeCache {
    /// Builds the cache from per-frame images. `images[t]` is frame `t`'s
    /// row-major `[h·w, 3]` buffer.
    pub fn build(
        images: &[Vec<f64>],
        h: usize,
        w: usize,
        interval: usize,
        codec: &LatentCodec,
    ) -> Result<Self> {
        if interval == 0 || images.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "keyframe cache needs frames and a positive interval (got {} frames, k={interval})",
                images.len()
            )));
        }
        let mut cache = Self {
            interval,
            frames: Vec::new(),
            images: Vec::new(),
            latents: Vec::new(),
            encodes: 0,
        };
        let mut t = 0;
        while t < images.len() {
            cache.frames.push(t);
            cache.images.push(images[t].clone());
            cache.latents.push(codec.encode_latent(&images[t], h, w)?);
            cache.encodes += 1;
            t += interval;
        }
        Ok(cache)
    }

    /// Index (into the cache vectors) of the keyframe nearest frame `t`,
    /// ties broken toward the earlier keyframe.
    pub fn nearest(&self, t: usize) -> usize {
        let mut best = 0;
        let mut best_d = usize::MAX;
        for (idx, &kf) in self.frames.iter().enumerate() {
            let d = t.abs_diff(kf);
            if d < best_d {
                best = idx;
                best_d = d;
            }
        }
        best
    }
}

// ---------------------------------------------------------------------------
// The forward (non-differentiable) half of a distillation step
// ---------------------------------------------------------------------------

/// Result of [`sds_latent_pass`]: the latent-space gradient and the loss
/// value `‖ŵ(ε̂-ε)‖²` (what `‖detached(z-grad)-z‖²` evaluates to).
pub struct SdsOutcome {
    /// Channel-major `[3, lh, lw]` gradient `ŵ(i)·(ε̂-ε)`.
    pub grad_cm: Vec<f64>,
    pub value: f64,
}

/// Runs noising and denoising for one virtual view and assembles the
/// latent-space distillation gradient.
///
/// `z_cm` is the clean latent in `f64`, channel-major. The latent is
/// quantized to wire precision before noising and the noisy latent again
/// before the denoiser call, so local and remote denoisers receive
/// identical bytes. `ε` is drawn element-wise (standard normal, channel-major
/// order, `z.len()` draws) — always, even when `w_hat` is zero, so the RNG
/// stream does not depend on view geometry.
#[allow(clippy::too_many_arguments)]
pub fn sds_latent_pass(
    z_cm: &[f64],
    shape: [usize; 3],
    schedule: &NoiseSchedule,
    i: f64,
    denoiser: &dyn Denoiser,
    reference: &Latent,
    delta_pose: [f64; 3],
    guidance: f64,
    w_hat: f64,
    rng: &mut ChaCha20Rng,
) -> Result<SdsOutcome> {
    let epsilon: Vec<f64> = (0..z_cm.len()).map(|_| rng.sample(StandardNormal)).collect();
    let zq = upcast_f64(&quantize_f32(z_cm));
    let ab = schedule.alpha_bar(i);
    let z_tilde = add_noise(&zq, &epsilon, ab)?;
    let noisy = Latent::new(shape, quantize_f32(&z_tilde))?;
    let eps_hat = denoiser.predict(&noisy, i, reference, delta_pose, guidance)?;
    if eps_hat.shape != shape {
        return Err(Error::Protocol(format!(
            "denoiser returned shape {:?} for latent {:?}",
            eps_hat.shape, shape
        )));
    }
    let mut grad_cm = vec![0.0; z_cm.len()];
    let mut value = 0.0;
    for (j, g) in grad_cm.iter_mut().enumerate() {
        *g = w_hat * (eps_hat.data[j] as f64 - epsilon[j]);
        value += *g * *g;
    }
    Ok(SdsOutcome { grad_cm, value })
}

// ---------------------------------------------------------------------------
// Wire protocol
// ---------------------------------------------------------------------------

/// JSON wire types for the remote denoiser: `POST /v1/denoise` with a
/// [`protocol::DenoiseRequest`] body answered by a
/// [`protocol::DenoiseResponse`]. Tensor payloads are base64 of
/// little-endian 32-bit floats; byte order and float width are part of the
/// contract.
pub mod protocol {
    use super::*;
    use byteorder::{ByteOrder, LittleEndian};

    pub const DENOISE_PATH: &str = "/v1/denoise";
    pub const VERSION: u32 = 1;

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct TensorMsg {
        pub shape: Vec<usize>,
        /// base64, little-endian f32.
        pub data: String,
    }

    impl TensorMsg {
        pub fn from_latent(l: &Latent) -> Self {
            let mut bytes = vec![0u8; l.data.len() * 4];
            LittleEndian::write_f32_into(&l.data, &mut bytes);
            Self { shape: l.shape.to_vec(), data: BASE64.encode(bytes) }
        }

        pub fn to_latent(&self) -> Result<Latent> {
            if self.shape.len() != 3 {
                return Err(Error::Protocol(format!(
                    "tensor rank {} (expected [c,h,w])",
                    self.shape.len()
                )));
            }
            let bytes = BASE64
                .decode(&self.data)
                .map_err(|e| Error::Protocol(format!("tensor payload is not base64: {e}")))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::Protocol(format!(
                    "tensor payload of {} bytes is not a whole number of f32",
                    bytes.len()
                )));
            }
            let mut data = vec![0f32; bytes.len() / 4];
            LittleEndian::read_f32_into(&bytes, &mut data);
            Latent::new([self.shape[0], self.shape[1], self.shape[2]], data)
                .map_err(|e| Error::Protocol(e.to_string()))
        }
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct DenoiseRequest {
        pub version: u32,
        pub latent: TensorMsg,
        pub timestep: f64,
        pub reference: TensorMsg,
        pub delta_pose: [f64; 3],
        pub guidance: f64,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct DenoiseResponse {
        pub epsilon: TensorMsg,
    }

    /// Server-side request handling, transport-free: JSON body in, JSON body
    /// out. HTTP servers wrap this; tests drive it directly.
    pub fn handle_denoise_json(denoiser: &dyn Denoiser, body: &str) -> Result<String> {
        let req: DenoiseRequest =
            serde_json::from_str(body).map_err(|e| Error::Protocol(format!("bad request: {e}")))?;
        if req.version != VERSION {
            return Err(Error::Protocol(format!(
                "protocol version {} (expected {VERSION})",
                req.version
            )));
        }
        let noisy = req.latent.to_latent()?;
        let reference = req.reference.to_latent()?;
        let eps = denoiser.predict(&noisy, req.timestep, &reference, req.delta_pose, req.guidance)?;
        Ok(serde_json::to_string(&DenoiseResponse { epsilon: TensorMsg::from_latent(&eps) })?)
    }
}

/// Denoiser client speaking the wire protocol. Every failure mode —
/// connection errors, timeouts, non-200 statuses, malformed or
/// wrongly-shaped replies — is a hard error; there are no partial results.
pub struct RemoteDenoiser {
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteDenoiser {
    /// `endpoint` is the server base (e.g. `http://127.0.0.1:7431`);
    /// `timeout` caps each request end to end.
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(timeout)
            .timeout(timeout)
            .build();
        Self { endpoint: endpoint.trim_end_matches('/').to_string(), agent }
    }
}

impl Denoiser for RemoteDenoiser {
    fn predict(
        &self,
        noisy: &Latent,
        timestep: f64,
        reference: &Latent,
        delta_pose: [f64; 3],
        guidance: f64,
    ) -> Result<Latent> {
        let req = protocol::DenoiseRequest {
            version: protocol::VERSION,
            latent: protocol::TensorMsg::from_latent(noisy),
            timestep,
            reference: protocol::TensorMsg::from_latent(reference),
            delta_pose,
            guidance,
        };
        let url = format!("{}{}", self.endpoint, protocol::DENOISE_PATH);
        let body = serde_json::to_string(&req)?;
        let resp = self
            .agent
            .post(&url)
            .set("content-type", "application/json")
            .send_string(&body)
            .map_err(|e| Error::Protocol(format!("denoise request failed: {e}")))?;
        let text = resp
            .into_string()
            .map_err(|e| Error::Protocol(format!("denoise reply unreadable: {e}")))?;
        let parsed: protocol::DenoiseResponse = serde_json::from_str(&text)
            .map_err(|e| Error::Protocol(format!("denoise reply is not valid JSON: {e}")))?;
        let eps = parsed.epsilon.to_latent()?;
        if eps.shape != noisy.shape {
            return Err(Error::Protocol(format!(
                "denoise reply shape {:?} vs request {:?}",
                eps.shape, noisy.shape
            )));
        }
        Ok(eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn flat_latent(shape: [usize; 3], v: f32) -> Latent {
        Latent::new(shape, vec![v; shape.iter().product()]).unwrap()
    }

    #[test]
    fn schedule_anchors_and_monotonicity() {
        let s = NoiseSchedule::scaled_linear();
        // First table entry is exactly 1 - β_min.
        assert_eq!(s.alpha_bar(0.0), 1.0 - NoiseSchedule::BETA_MIN);
        assert!((s.alpha_bar(0.0) - 0.99915).abs() < 1e-5);
        assert!(s.alpha_bar(1.0) < 0.01);
        assert!(s.alpha_bar(1.0) > 0.0);
        let mut prev = f64::INFINITY;
        for k in 0..=100 {
            let v = s.alpha_bar(k as f64 / 100.0);
            assert!(v < prev, "alpha_bar must strictly decrease (i={k})");
            prev = v;
        }
    }

    #[test]
    fn add_noise_moments_match() {
        let s = NoiseSchedule::scaled_linear();
        let ab = s.alpha_bar(0.4);
        let z = [0.7];
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let n = 200_000;
        let (mut mean, mut second) = (0.0, 0.0);
        for _ in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            let zt = add_noise(&z, &[e], ab).unwrap()[0];
            mean += zt;
            second += zt * zt;
        }
        mean /= n as f64;
        second /= n as f64;
        // E[z̃] = √ᾱ·z and E[z̃²] = ᾱ·z² + (1-ᾱ).
        assert!((mean - ab.sqrt() * z[0]).abs() < 0.01);
        assert!((second - (ab * z[0] * z[0] + (1.0 - ab))).abs() < 0.02);
        // Trivia: ε = 0 reproduces √ᾱ·z; i = 0 is nearly the identity.
        assert_eq!(add_noise(&z, &[0.0], ab).unwrap()[0], ab.sqrt() * z[0]);
        let near = add_noise(&z, &[0.3], s.alpha_bar(0.0)).unwrap()[0];
        assert!((near - z[0]).abs() < 0.01);
        assert!(add_noise(&z, &[0.0, 1.0], ab).is_err());
    }

    #[test]
    fn toy_epsilon_identities() {
        let s = NoiseSchedule::scaled_linear();
        let ab = s.alpha_bar(0.3);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let z: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let zs: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let eps: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
        let zt = add_noise(&z, &eps, ab).unwrap();
        // z = z* recovers ε exactly.
        let eh_same = toy_epsilon(&add_noise(&zs, &eps, ab).unwrap(), ab, &zs);
        for (a, b) in eh_same.iter().zip(&eps) {
            assert!((a - b).abs() < 1e-12);
        }
        // Definition vs closed form ε̂-ε = √ᾱ/√(1-ᾱ)·(z-z*).
        let eh = toy_epsilon(&zt, ab, &zs);
        let scale = ab.sqrt() / (1.0 - ab).max(1e-6).sqrt();
        for j in 0..12 {
            let closed = scale * (z[j] - zs[j]);
            assert!(((eh[j] - eps[j]) - closed).abs() < 1e-10);
        }
    }

    #[test]
    fn sds_drives_free_latent_toward_target() {
        // 100 gradient steps on a free latent with the toy denoiser shrink
        // the distance to the target.
        let s = NoiseSchedule::scaled_linear();
        let shape = [3usize, 2, 2];
        let target: Vec<f64> = (0..12).map(|j| 0.1 + 0.07 * j as f64).collect();
        let targets = ToyTargetSet {
            entries: vec![ToyTarget {
                reference: flat_latent(shape, 0.5),
                delta_pose: [0.0; 3],
                target: Latent::new(shape, quantize_f32(&target)).unwrap(),
            }],
        };
        let den = ToyDenoiser::new(targets);
        let reference = flat_latent(shape, 0.5);
        let mut z: Vec<f64> = vec![0.9; 12];
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let dist = |z: &[f64]| -> f64 {
            z.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let d0 = dist(&z);
        for step in 0..100 {
            let i = 0.02 + 0.4 * ((step * 7919) % 100) as f64 / 100.0;
            let w_hat = (1.0 - s.alpha_bar(i)) * angular_gain(0.5);
            let out = sds_latent_pass(
                &z, shape, &s, i, &den, &reference, [0.0, 0.3, 0.8], 5.0, w_hat, &mut rng,
            )
            .unwrap();
            for (zv, g) in z.iter_mut().zip(&out.grad_cm) {
                *zv -= 0.5 * g;
            }
        }
        assert!(dist(&z) < 0.2 * d0, "distance {} → {}", d0, dist(&z));
    }

    #[test]
    fn sds_weight_anchors() {
        let s = NoiseSchedule::scaled_linear();
        let a = Vector3::new(0.0, -2.0, 0.0);
        // Coincident views weigh zero at any timestep.
        for i in [0.0, 0.3, 0.9] {
            assert_eq!(sds_weight(&s, i, &a, &a).unwrap(), 0.0);
        }
        // A quarter turn has normalized angular distance 0.5.
        let q = Vector3::new(2.0, 0.0, 0.0);
        assert!((angular_gain(0.5) - 0.64872).abs() < 1e-5);
        let i = 0.7;
        let expect = (1.0 - s.alpha_bar(i)) * angular_gain(0.5);
        assert!((sds_weight(&s, i, &a, &q).unwrap() - expect).abs() < 1e-12);
        // Antipodal views: (1-ᾱ)(e-1).
        let anti = Vector3::new(0.0, 5.0, 0.0);
        let expect = (1.0 - s.alpha_bar(i)) * (1.0f64.exp() - 1.0);
        assert!((sds_weight(&s, i, &a, &anti).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_zeroes_the_latent_gradient() {
        let s = NoiseSchedule::scaled_linear();
        let shape = [3usize, 2, 2];
        let den = ToyDenoiser::new(ToyTargetSet {
            entries: vec![ToyTarget {
                reference: flat_latent(shape, 0.2),
                delta_pose: [0.0; 3],
                target: flat_latent(shape, 0.9),
            }],
        });
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let z = vec![0.4; 12];
        let out = sds_latent_pass(
            &z, shape, &s, 0.3, &den, &flat_latent(shape, 0.2), [0.0; 3], 5.0, 0.0, &mut rng,
        )
        .unwrap();
        assert_eq!(out.grad_cm, vec![0.0; 12]);
        assert_eq!(out.value, 0.0);
        // The ε draw happened regardless: the stream advanced by 12 samples.
        let mut fresh = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..12 {
            let _: f64 = fresh.sample(StandardNormal);
        }
        assert_eq!(rng.gen::<u64>(), fresh.gen::<u64>());
    }

    #[test]
    fn target_selection_prefers_reference_then_pose() {
        let shape = [3usize, 1, 1];
        let mk = |rv: f32, pose: [f64; 3], tv: f32| ToyTarget {
            reference: flat_latent(shape, rv),
            delta_pose: pose,
            target: flat_latent(shape, tv),
        };
        let set = ToyTargetSet {
            entries: vec![
                mk(0.0, [0.0, 0.0, 0.0], 1.0),
                mk(0.0, [0.0, 0.0, 1.0], 2.0),
                mk(1.0, [0.0, 0.0, 1.0], 3.0),
            ],
        };
        // Reference match dominates even with a worse pose.
        let t = set.select(&flat_latent(shape, 0.98), [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(t.target.data[0], 3.0);
        // Among equal references, nearest pose wins.
        let t = set.select(&flat_latent(shape, 0.0), [0.0, 0.0, 0.9]).unwrap();
        assert_eq!(t.target.data[0], 2.0);
        let empty = ToyTargetSet::default();
        assert!(empty.select(&flat_latent(shape, 0.0), [0.0; 3]).is_err());
    }

    #[test]
    fn keyframes_sit_on_the_interval_grid_and_encode_once() {
        let (h, w) = (2, 2);
        let images: Vec<Vec<f64>> = (0..25).map(|t| vec![t as f64 / 25.0; h * w * 3]).collect();
        let cache = KeyframeCache::build(&images, h, w, 10, &LatentCodec::Identity).unwrap();
        assert_eq!(cache.frames, vec![0, 10, 20]);
        assert_eq!(cache.encodes, 3);
        // Nearest-keyframe rule: |14-10| < |14-20| → 10; the tie at 15 goes
        // to the earlier keyframe; t=0 maps to itself.
        assert_eq!(cache.frames[cache.nearest(14)], 10);
        assert_eq!(cache.frames[cache.nearest(15)], 10);
        assert_eq!(cache.frames[cache.nearest(0)], 0);
        let n = cache.encodes;
        for t in 0..25 {
            let _ = cache.nearest(t);
        }
        assert_eq!(cache.encodes, n, "lookups must not re-encode");
    }

    #[test]
    fn codec_roundtrips_and_block_means() {
        let (h, w) = (4, 4);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let rgb: Vec<f64> = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let id = LatentCodec::Identity;
        assert_eq!(id.decode_pm(&id.encode_pm(&rgb, h, w).unwrap(), h, w).unwrap(), rgb);
        let down = LatentCodec::Downsample { factor: 2 };
        let pm = down.encode_pm(&rgb, h, w).unwrap();
        assert_eq!(pm.len(), 2 * 2 * 3);
        // Top-left latent pixel = mean of pixels (0,0),(1,0),(0,1),(1,1).
        let manual = (rgb[0] + rgb[3] + rgb[w * 3] + rgb[(w + 1) * 3]) / 4.0;
        assert!((pm[0] - manual).abs() < 1e-15);
        assert!(down.latent_hw(5, 4).is_err());
        // Channel-major round trip.
        let cm = pixel_to_channel_major(&pm, 4);
        assert_eq!(channel_to_pixel_major(&cm, 4), pm);
        assert_eq!(cm[0], pm[0]);
        assert_eq!(cm[1], pm[3]); // channel 0 of the second pixel
        assert_eq!(cm[4], pm[1]); // channel 1 of the first pixel
    }

    #[test]
    fn wire_tensors_roundtrip_exactly() {
        let l = Latent::new([3, 1, 2], vec![0.1, -2.5e-8, 3.25, f32::MIN_POSITIVE, 0.0, 9.0])
            .unwrap();
        let msg = protocol::TensorMsg::from_latent(&l);
        assert_eq!(msg.to_latent().unwrap(), l);
        let bad = protocol::TensorMsg { shape: vec![2, 2], data: msg.data.clone() };
        assert!(bad.to_latent().is_err());
        let nonb64 = protocol::TensorMsg { shape: vec![3, 1, 2], data: "!!".into() };
        assert!(nonb64.to_latent().is_err());
    }

    #[test]
    fn served_toy_denoiser_matches_local_calls() {
        let shape = [3usize, 2, 2];
        let den = ToyDenoiser::new(ToyTargetSet {
            entries: vec![ToyTarget {
                reference: flat_latent(shape, 0.3),
                delta_pose: [0.0, 0.1, 0.2],
                target: flat_latent(shape, 0.8),
            }],
        });
        let noisy = Latent::new(shape, (0..12).map(|j| 0.05 * j as f32).collect()).unwrap();
        let reference = flat_latent(shape, 0.3);
        let req = protocol::DenoiseRequest {
            version: 1,
            latent: protocol::TensorMsg::from_latent(&noisy),
            timestep: 0.4,
            reference: protocol::TensorMsg::from_latent(&reference),
            delta_pose: [0.0, 0.1, 0.2],
            guidance: 5.0,
        };
        let reply = protocol::handle_denoise_json(&den, &serde_json::to_string(&req).unwrap())
            .unwrap();
        let parsed: protocol::DenoiseResponse = serde_json::from_str(&reply).unwrap();
        let local = den.predict(&noisy, 0.4, &reference, [0.0, 0.1, 0.2], 5.0).unwrap();
        assert_eq!(parsed.epsilon.to_latent().unwrap(), local);
        // Version mismatch is rejected.
        let bad = protocol::DenoiseRequest { version: 2, ..req };
        let err = protocol::handle_denoise_json(&den, &serde_json::to_string(&bad).unwrap());
        assert!(err.is_err());
    }

    #[test]
    fn remote_client_roundtrips_against_echo_server() {
        // Echo server: replies with the request latent as ε̂.
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let port = server.server_addr().to_ip().unwrap().port();
        let handle = std::thread::spawn(move || {
            for _ in 0..3 {
                let mut req = match server.recv() {
                    Ok(r) => r,
                    Err(_) => return,
                };
                let mut body = String::new();
                req.as_reader().read_to_string(&mut body).unwrap();
                let parsed: protocol::DenoiseRequest = serde_json::from_str(&body).unwrap();
                let reply = match parsed.version {
                    1 => serde_json::to_string(&protocol::DenoiseResponse {
                        epsilon: parsed.latent,
                    })
                    .unwrap(),
                    _ => String::new(),
                };
                let _ = req.respond(tiny_http::Response::from_string(reply));
            }
        });
        let client = RemoteDenoiser::new(
            &format!("http://127.0.0.1:{port}"),
            Duration::from_secs(5),
        );
        let shape = [3usize, 1, 2];
        let noisy = Latent::new(shape, vec![1.0, -2.0, 0.5, 0.25, -0.125, 8.0]).unwrap();
        let eps = client
            .predict(&noisy, 0.2, &flat_latent(shape, 0.0), [0.0; 3], 5.0)
            .unwrap();
        assert_eq!(eps, noisy, "echo server must hand the latent back verbatim");
        drop(client);
        // A second and third request keep the server thread bounded.
        let client = RemoteDenoiser::new(
            &format!("http://127.0.0.1:{port}"),
            Duration::from_secs(5),
        );
        let _ = client.predict(&noisy, 0.2, &flat_latent(shape, 0.0), [0.0; 3], 5.0);
        let _ = client.predict(&noisy, 0.2, &flat_latent(shape, 0.0), [0.0; 3], 5.0);
        handle.join().unwrap();
    }

    #[test]
    fn remote_client_rejects_errors_and_times_out() {
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let port = server.server_addr().to_ip().unwrap().port();
        let handle = std::thread::spawn(move || {
            // 1st: malformed body. 2nd: non-200. 3rd: stall past the client
            // deadline.
            for mode in 0..3 {
                let mut req = match server.recv() {
                    Ok(r) => r,
                    Err(_) => return,
                };
                let mut body = String::new();
                let _ = req.as_reader().read_to_string(&mut body);
                match mode {
                    0 => {
                        let _ = req.respond(tiny_http::Response::from_string("not json"));
                    }
                    1 => {
                        let _ = req.respond(
                            tiny_http::Response::from_string("denoiser exploded")
                                .with_status_code(500),
                        );
                    }
                    _ => {
                        std::thread::sleep(Duration::from_millis(1500));
                        let _ = req.respond(tiny_http::Response::from_string("{}"));
                    }
                }
            }
        });
        let client =
            RemoteDenoiser::new(&format!("http://127.0.0.1:{port}"), Duration::from_millis(400));
        let shape = [3usize, 1, 1];
        let noisy = flat_latent(shape, 0.5);
        let reference = flat_latent(shape, 0.0);
        for expected in ["not valid JSON", "failed", "failed"] {
            let err = client
                .predict(&noisy, 0.2, &reference, [0.0; 3], 5.0)
                .unwrap_err()
                .to_string();
            assert!(err.contains(expected), "expected '{expected}' in: {err}");
        }
        handle.join().unwrap();
    }
}
