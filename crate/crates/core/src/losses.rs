//! Training losses over frozen sample plans.
//!
//! A training step is split into a *plan* stage and an *evaluation* stage.
//! Planning consumes all of the step's randomness (ray jitter, probe
//! directions, view/light/background/timestep draws) and freezes the result
//! into plain data; evaluation is then a deterministic function of the
//! parameters, which keeps gradients finite-difference checkable and lets
//! the evaluation run in chunks of rays whose tapes all accumulate into one
//! gradient store.
//!
//! Real views supervise rendered color/depth/mass against observations plus
//! the truncated-SDF, surface, smoothness, latent-code, and β terms. Virtual
//! views carry the score-distillation term and the canonical-geometry
//! regularizers (orientation, normal smoothness, eikonal), the latter probed
//! through the canonical map so their gradients never touch the deformation
//! network.
//!
//! Score distillation runs in two passes. Pass A renders the virtual image
//! in value-only chunks, encodes it to a latent, and obtains the frozen
//! latent-space gradient `ŵ·(ε̂-ε)`. Because the latent is a per-cell mean
//! of pixels, the surrogate loss `‖stopgrad(z-grad)-z‖²` is a *linear*
//! functional of the rendered pixels with constant coefficients
//! `2·λ·grad/|cell|`; pass B re-renders the same chunks on tape and applies
//! those coefficients, which yields exactly the gradient `2·λ·grad·∂z/∂θ`
//! without ever holding a full-image tape in memory.

use crate::autodiff::{ensure_finite, GradStore, ParamStore, Tape, Var, MAX_OPTICAL_DEPTH};
use crate::error::{Error, Result};
use crate::fields::{SceneModel, WarpMap};
use crate::geometry::{
    generate_rays, to_polar, wrap_angle, Intrinsics, Ray, RigidPose, ViewBounds,
};
use crate::prior::{
    pixel_to_channel_major, sds_latent_pass, sds_weight, Denoiser, KeyframeCache, LatentCodec,
    NoiseSchedule,
};
use crate::render::{
    plan_samples, render_plan_shaded_tape, render_plan_tape, sample_hemisphere_dir, OccupancyGrid,
    RenderConfig, SamplePlan, ShadeMode, ShadeParams,
};
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Weight of every loss term. The defaults are a working starting point, not
/// a validated optimum; scenes with very different depth noise or texture
/// may need retuning.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub color: f64,
    pub depth: f64,
    pub mask: f64,
    pub sdf: f64,
    pub surf: f64,
    pub smooth: f64,
    pub ori: f64,
    pub normal: f64,
    pub eik: f64,
    pub code: f64,
    pub beta: f64,
    pub sds: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            color: 10.0,
            depth: 1.0,
            mask: 0.1,
            sdf: 1000.0,
            surf: 100.0,
            smooth: 1.0,
            ori: 0.1,
            normal: 1.0,
            eik: 0.1,
            code: 1.0,
            beta: 0.01,
            sds: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("color", self.color),
            ("depth", self.depth),
            ("mask", self.mask),
            ("sdf", self.sdf),
            ("surf", self.surf),
            ("smooth", self.smooth),
            ("ori", self.ori),
            ("normal", self.normal),
            ("eik", self.eik),
            ("code", self.code),
            ("beta", self.beta),
            ("sds", self.sds),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidConfig(format!("loss weight {name} = {w}")));
            }
        }
        Ok(())
    }
}

/// Geometry-supervision options shared by the depth-derived terms.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TruncationConfig {
    /// Truncation band of the SDF supervision, in scene units.
    pub tr: f64,
    /// Surface-smoothness probes per real batch.
    pub n_smooth: usize,
    /// Length of the smoothness/normal perturbation offsets.
    pub perturb_radius: f64,
    /// Finite-difference step for SDF gradients (normals, probe frames).
    pub fd_step: f64,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self { tr: 0.05, n_smooth: 4, perturb_radius: 0.01, fd_step: 0.005 }
    }
}

/// Virtual-view options: shading mode mixture, regularizer probe count, and
/// the pinhole used for prior views.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct VirtualViewConfig {
    /// Ambient floor of the diffuse shading.
    pub ambient: f64,
    /// Probability of rendering plain albedo.
    pub p_albedo: f64,
    /// Probability of shading white albedo (pure shape).
    pub p_textureless: f64,
    /// Canonical-regularizer probe points per virtual batch.
    pub n_reg: usize,
    /// Virtual focal length as a multiple of the image resolution.
    pub focal_ratio: f64,
}

impl Default for VirtualViewConfig {
    fn default() -> Self {
        Self { ambient: 0.1, p_albedo: 0.25, p_textureless: 0.5, n_reg: 64, focal_ratio: 0.9 }
    }
}

/// Per-term loss values of one step (raw, before weighting) plus the
/// weighted total. Terms a step does not carry stay zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub color: f64,
    pub depth: f64,
    pub mask: f64,
    pub sdf: f64,
    pub surf: f64,
    pub smooth: f64,
    pub ori: f64,
    pub normal: f64,
    pub eik: f64,
    pub code: f64,
    pub beta: f64,
    pub sds: f64,
    pub total: f64,
}

impl LossReport {
    /// Fills `total` from the weights and rejects non-finite terms, naming
    /// the offender.
    pub fn finish(mut self, w: &LossWeights) -> Result<Self> {
        for (name, v) in [
            ("color", self.color),
            ("depth", self.depth),
            ("mask", self.mask),
            ("sdf", self.sdf),
            ("surf", self.surf),
            ("smooth", self.smooth),
            ("ori", self.ori),
            ("normal", self.normal),
            ("eik", self.eik),
            ("code", self.code),
            ("beta", self.beta),
            ("sds", self.sds),
        ] {
            ensure_finite(name, v)?;
        }
        self.total = w.color * self.color
            + w.depth * self.depth
            + w.mask * self.mask
            + w.sdf * self.sdf
            + w.surf * self.surf
            + w.smooth * self.smooth
            + w.ori * self.ori
            + w.normal * self.normal
            + w.eik * self.eik
            + w.code * self.code
            + w.beta * self.beta
            + w.sds * self.sds;
        ensure_finite("total", self.total)?;
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// Real views
// ---------------------------------------------------------------------------

/// One batch of observed rays. `depth` is the distance along each (unit)
/// ray direction — callers convert z-depth with `zdepth_factor` — with `0`
/// marking pixels without a depth reading. `mask` is the 0/1 foreground.
pub struct RealObs<'a> {
    pub rays: &'a [Ray],
    pub rgb: &'a [f64],
    pub depth: &'a [f64],
    pub mask: &'a [f64],
}

/// Frozen plan for one real-view batch: the sample positions, the copied
/// observations, and every derived supervision target.
pub struct RealPlan {
    pub plan: SamplePlan,
    pub t_norm: f64,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub mask: Vec<f64>,
    /// Samples inside the truncation band or free space, as global sample
    /// indices with their SDF targets.
    pub sdf_idx: Vec<u32>,
    pub sdf_target: Vec<f64>,
    /// Back-projected surface points `[k,3]` with their observed colors.
    pub surf_points: Vec<f64>,
    pub surf_rgb: Vec<f64>,
    /// Smoothness probe pairs (center, center+δ), degenerate-gradient
    /// candidates already dropped.
    pub smooth_a: Vec<f64>,
    pub smooth_b: Vec<f64>,
    /// Temporal-grid triples `(level, [(k-1,k,k+1)…])` inside the window.
    pub code_triples: Vec<(usize, Vec<(u32, u32, u32)>)>,
    /// Finite-difference step the smoothness gradients were planned with.
    pub fd_step: f64,
}

/// An orthonormal pair spanning the plane perpendicular to `g`.
fn plane_basis(g: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let n = g.normalize();
    let mut up = Vector3::new(0.0, 0.0, 1.0);
    if n.cross(&up).norm() < 1e-6 {
        up = Vector3::new(1.0, 0.0, 0.0);
    }
    let e1 = n.cross(&up).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

/// Plans one real-view batch.
///
/// Randomness, in draw order: one uniform jitter per ray (even for rays that
/// miss the bounds), then one uniform angle per smoothness probe (drawn even
/// when the probe is later dropped), keeping the stream's layout independent
/// of what the probes find.
#[allow(clippy::too_many_arguments)]
pub fn plan_real_batch(
    model: &SceneModel,
    params: &ParamStore,
    obs: &RealObs,
    occ: &OccupancyGrid,
    t_norm: f64,
    ratio: f64,
    rcfg: &RenderConfig,
    tcfg: &TruncationConfig,
    code_window: f64,
    rng: &mut ChaCha20Rng,
) -> RealPlan {
    let n_rays = obs.rays.len();
    assert_eq!(obs.rgb.len(), n_rays * 3);
    assert_eq!(obs.depth.len(), n_rays);
    assert_eq!(obs.mask.len(), n_rays);

    let plan = plan_samples(obs.rays, occ, rcfg.step_size, rng);

    // Truncated-SDF supervision: for a sample at distance d on a ray whose
    // surface sits at distance d*, the target is the signed margin d*-d,
    // clipped to +tr in free space; samples more than tr behind the surface
    // are occluded and excluded.
    let mut sdf_idx = Vec::new();
    let mut sdf_target = Vec::new();
    let mut surf_points = Vec::new();
    let mut surf_rgb = Vec::new();
    let mut surf_ray: Vec<usize> = Vec::new();
    for r in 0..n_rays {
        let valid = obs.mask[r] > 0.5 && obs.depth[r] > 0.0;
        if !valid {
            continue;
        }
        let d_star = obs.depth[r];
        let (s0, s1) = (plan.starts[r] as usize, plan.starts[r + 1] as usize);
        for s in s0..s1 {
            let b = d_star - plan.dists[s];
            if b > tcfg.tr {
                sdf_idx.push(s as u32);
                sdf_target.push(tcfg.tr);
            } else if b >= -tcfg.tr {
                sdf_idx.push(s as u32);
                sdf_target.push(b);
            }
        }
        let p = obs.rays[r].point_at(d_star);
        surf_points.extend_from_slice(&[p.x, p.y, p.z]);
        surf_rgb.extend_from_slice(&obs.rgb[r * 3..r * 3 + 3]);
        surf_ray.push(r);
    }

    // Smoothness probes: evenly strided surface points, each displaced by
    // `perturb_radius` in a random direction inside the local tangent plane
    // (perpendicular to the finite-difference SDF gradient).
    let n_surf = surf_ray.len();
    let mut smooth_a = Vec::new();
    let mut smooth_b = Vec::new();
    for i in 0..tcfg.n_smooth {
        let theta: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
        if n_surf == 0 {
            continue;
        }
        let k = (i * n_surf) / tcfg.n_smooth;
        let c = [surf_points[k * 3], surf_points[k * 3 + 1], surf_points[k * 3 + 2]];
        let mut probe = Vec::with_capacity(21);
        probe.extend_from_slice(&c);
        for axis in 0..3 {
            for sign in [1.0f64, -1.0] {
                let mut p = c;
                p[axis] += sign * tcfg.fd_step;
                probe.extend_from_slice(&p);
            }
        }
        let s = model.sdf_obs_plain(params, &probe, t_norm, ratio);
        let g = Vector3::new(
            (s[1] - s[2]) / (2.0 * tcfg.fd_step),
            (s[3] - s[4]) / (2.0 * tcfg.fd_step),
            (s[5] - s[6]) / (2.0 * tcfg.fd_step),
        );
        if g.norm() < 1e-8 {
            continue;
        }
        let (e1, e2) = plane_basis(&g);
        let d = e1 * theta.cos() + e2 * theta.sin();
        smooth_a.extend_from_slice(&c);
        smooth_b.extend_from_slice(&[
            c[0] + tcfg.perturb_radius * d.x,
            c[1] + tcfg.perturb_radius * d.y,
            c[2] + tcfg.perturb_radius * d.z,
        ]);
    }

    RealPlan {
        plan,
        t_norm,
        rgb: obs.rgb.to_vec(),
        depth: obs.depth.to_vec(),
        mask: obs.mask.to_vec(),
        sdf_idx,
        sdf_target,
        surf_points,
        surf_rgb,
        smooth_a,
        smooth_b,
        code_triples: model.temporal.smoothness_triples(t_norm, code_window),
        fd_step: tcfg.fd_step,
    }
}

/// Rays `[a,b)` of a plan as a standalone plan.
fn slice_plan(plan: &SamplePlan, a: usize, b: usize) -> SamplePlan {
    let s0 = plan.starts[a] as usize;
    let s1 = plan.starts[b] as usize;
    SamplePlan {
        positions: plan.positions[s0 * 3..s1 * 3].to_vec(),
        deltas: plan.deltas[s0..s1].to_vec(),
        dists: plan.dists[s0..s1].to_vec(),
        starts: plan.starts[a..=b].iter().map(|&s| s - plan.starts[a]).collect(),
    }
}

/// Evaluates one real-view batch in ray chunks, accumulating weighted
/// gradients into `grads` and returning the per-term report.
#[allow(clippy::too_many_arguments)]
pub fn real_loss_chunks(
    model: &SceneModel,
    params: &ParamStore,
    rp: &RealPlan,
    weights: &LossWeights,
    ratio: f64,
    beta_floor: f64,
    chunk: usize,
    grads: &mut GradStore,
) -> Result<LossReport> {
    assert!(chunk > 0);
    let n_rays = rp.plan.n_rays();
    let n_mask = rp.mask.iter().filter(|&&m| m > 0.5).count();
    let n_depth = (0..n_rays).filter(|&r| rp.mask[r] > 0.5 && rp.depth[r] > 0.0).count();
    let n_sdf = rp.sdf_idx.len();
    let mut report = LossReport::default();

    let mut a = 0;
    while a < n_rays {
        let b = (a + chunk).min(n_rays);
        let sub = slice_plan(&rp.plan, a, b);
        let s0 = rp.plan.starts[a] as usize;
        let s1 = rp.plan.starts[b] as usize;
        let mut tape = Tape::new(params);
        let out = render_plan_tape(&mut tape, model, &sub, rp.t_norm, ratio, beta_floor);
        let mut terms: Vec<(Var, f64)> = Vec::new();

        if n_mask > 0 {
            let mut w = Vec::with_capacity((b - a) * 3);
            for r in a..b {
                let m = if rp.mask[r] > 0.5 { 1.0 } else { 0.0 };
                w.extend_from_slice(&[m, m, m]);
            }
            let sq = tape.weighted_sum_sq(out.rgb, w, rp.rgb[a * 3..b * 3].to_vec());
            let term = tape.scale(sq, 1.0 / (3.0 * n_mask as f64));
            report.color += tape.value(term)[0];
            terms.push((term, weights.color));
        }
        if n_depth > 0 {
            let mut w = Vec::with_capacity(b - a);
            for r in a..b {
                w.push(if rp.mask[r] > 0.5 && rp.depth[r] > 0.0 { 1.0 } else { 0.0 });
            }
            let sq = tape.weighted_sum_sq(out.depth, w, rp.depth[a..b].to_vec());
            let term = tape.scale(sq, 1.0 / n_depth as f64);
            report.depth += tape.value(term)[0];
            terms.push((term, weights.depth));
        }
        {
            let bce = tape.bce_sum(out.mass, rp.mask[a..b].to_vec(), 1e-5);
            let term = tape.scale(bce, 1.0 / n_rays as f64);
            report.mask += tape.value(term)[0];
            terms.push((term, weights.mask));
        }
        if n_sdf > 0 {
            let mut local = Vec::new();
            let mut targets = Vec::new();
            for (i, &g) in rp.sdf_idx.iter().enumerate() {
                let g = g as usize;
                if g >= s0 && g < s1 {
                    local.push((g - s0) as u32);
                    targets.push(rp.sdf_target[i]);
                }
            }
            if !local.is_empty() {
                let n = local.len();
                let picked = tape.gather_rows(out.sdf, local);
                let sq = tape.weighted_sum_sq(picked, vec![1.0; n], targets);
                let term = tape.scale(sq, 1.0 / n_sdf as f64);
                report.sdf += tape.value(term)[0];
                terms.push((term, weights.sdf));
            }
        }
        if let Some(total) = weighted_total(&mut tape, &terms) {
            tape.backward(total, grads);
        }
        a = b;
    }

    // The non-ray terms share one small tape.
    {
        let mut tape = Tape::new(params);
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let n_surf = rp.surf_points.len() / 3;
        if n_surf > 0 {
            let x = tape.constant(rp.surf_points.clone(), n_surf, 3);
            let out = model.forward_obs_tape(&mut tape, x, rp.t_norm, ratio);
            let s2 = tape.square(out.sdf);
            let ssum = tape.sum_all(s2);
            let csum = tape.weighted_sum_sq(out.color, vec![1.0; n_surf * 3], rp.surf_rgb.clone());
            let term = tape.axpy(
                1.0 / n_surf as f64,
                ssum,
                1.0 / (3.0 * n_surf as f64),
                csum,
            );
            report.surf += tape.value(term)[0];
            terms.push((term, weights.surf));
        }
        let n_sm = rp.smooth_a.len() / 3;
        if n_sm > 0 {
            let mut both = rp.smooth_a.clone();
            both.extend_from_slice(&rp.smooth_b);
            let (g, _) = model.sdf_fd_gradient_tape(
                &mut tape,
                &both,
                rp.t_norm,
                ratio,
                rp.fd_step,
                WarpMap::Observation,
            );
            let ga = tape.gather_rows(g, (0..n_sm as u32).collect());
            let gb = tape.gather_rows(g, (n_sm as u32..2 * n_sm as u32).collect());
            let diff = tape.axpy(1.0, ga, -1.0, gb);
            let sq = tape.square(diff);
            let ssum = tape.sum_all(sq);
            let term = tape.scale(ssum, 1.0 / n_sm as f64);
            report.smooth += tape.value(term)[0];
            terms.push((term, weights.smooth));
        }
        let mut code_term: Option<Var> = None;
        for (level, triples) in &rp.code_triples {
            if triples.is_empty() {
                continue;
            }
            let grid = tape.param(model.temporal.blocks[*level]);
            let km: Vec<u32> = triples.iter().map(|t| t.0).collect();
            let kc: Vec<u32> = triples.iter().map(|t| t.1).collect();
            let kp: Vec<u32> = triples.iter().map(|t| t.2).collect();
            let vm = tape.gather_rows(grid, km);
            let vc = tape.gather_rows(grid, kc);
            let vp = tape.gather_rows(grid, kp);
            let twice = tape.axpy(2.0, vc, -1.0, vm);
            let lap = tape.axpy(1.0, twice, -1.0, vp);
            let sq = tape.square(lap);
            let ssum = tape.sum_all(sq);
            let feat = model.temporal.feat;
            let mean = tape.scale(ssum, 1.0 / (triples.len() * feat) as f64);
            code_term = Some(match code_term {
                None => mean,
                Some(acc) => tape.axpy(1.0, acc, 1.0, mean),
            });
        }
        if let Some(term) = code_term {
            report.code += tape.value(term)[0];
            terms.push((term, weights.code));
        }
        {
            let rho = tape.param(model.rho);
            let beta = tape.exp(rho);
            let term = tape.sum_all(beta);
            report.beta += tape.value(term)[0];
            terms.push((term, weights.beta));
        }
        if let Some(total) = weighted_total(&mut tape, &terms) {
            tape.backward(total, grads);
        }
    }

    report.finish(weights)
}

/// `Σ λ_i·term_i` as a tape scalar; `None` when no terms contributed.
fn weighted_total(tape: &mut Tape, terms: &[(Var, f64)]) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for &(t, w) in terms {
        acc = Some(match acc {
            None => tape.scale(t, w),
            Some(a) => tape.axpy(1.0, a, w, t),
        });
    }
    acc
}

// ---------------------------------------------------------------------------
// Virtual views
// ---------------------------------------------------------------------------

/// Frozen plan for one virtual-view batch: the sampled camera, shading and
/// background draws, the distillation timestep/weight/conditioning, and the
/// canonical-regularizer probes.
pub struct VirtualPlan {
    pub plan: SamplePlan,
    pub t_norm: f64,
    pub res: usize,
    pub pose: RigidPose,
    pub shade: ShadeParams,
    pub bg: [f64; 3],
    /// Fraction of the schedule, in the phase's timestep range.
    pub timestep: f64,
    pub w_hat: f64,
    pub delta_pose: [f64; 3],
    pub keyframe_idx: usize,
    /// Unit ray direction per pixel, row-major `[res², 3]`.
    pub ray_dirs: Vec<f64>,
    /// Uniform probe points for the eikonal term `[n_reg, 3]`.
    pub reg_points: Vec<f64>,
    /// Normal-smoothness pairs (kept probes only).
    pub normal_a: Vec<f64>,
    pub normal_b: Vec<f64>,
}

/// Plans one virtual-view batch.
///
/// Randomness, in draw order: 3 for the camera (radius, polar, azimuth), 1
/// for the shading mode, 2 for the light direction, 3 for the background
/// color, 1 for the timestep, 3 per regularizer probe point, 1 angle per
/// probe (drawn even when the probe is dropped), then one jitter per ray.
#[allow(clippy::too_many_arguments)]
pub fn plan_virtual_batch(
    model: &SceneModel,
    params: &ParamStore,
    bounds: &ViewBounds,
    ref_pose: &RigidPose,
    kf: &KeyframeCache,
    schedule: &NoiseSchedule,
    frame_idx: usize,
    t_norm: f64,
    t_range: [f64; 2],
    res: usize,
    ratio: f64,
    occ: &OccupancyGrid,
    rcfg: &RenderConfig,
    tcfg: &TruncationConfig,
    vcfg: &VirtualViewConfig,
    rng: &mut ChaCha20Rng,
) -> Result<VirtualPlan> {
    let (pose, polar) = crate::geometry::sample_virtual_view(rng, bounds)?;
    let mode = ShadeMode::draw(rng, vcfg.p_albedo, vcfg.p_textureless);
    let light = sample_hemisphere_dir(&pose.translation, rng);
    let bg = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let timestep = t_range[0] + rng.gen::<f64>() * (t_range[1] - t_range[0]);

    let mut reg_points = Vec::with_capacity(vcfg.n_reg * 3);
    for _ in 0..vcfg.n_reg {
        let p = crate::encoding::sample_unit_cube(rng);
        reg_points.extend_from_slice(&[
            p[0] * rcfg.bound_radius,
            p[1] * rcfg.bound_radius,
            p[2] * rcfg.bound_radius,
        ]);
    }
    let mut normal_a = Vec::new();
    let mut normal_b = Vec::new();
    for i in 0..vcfg.n_reg {
        let theta: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
        let c = [reg_points[i * 3], reg_points[i * 3 + 1], reg_points[i * 3 + 2]];
        let mut probe = Vec::with_capacity(21);
        probe.extend_from_slice(&c);
        for axis in 0..3 {
            for sign in [1.0f64, -1.0] {
                let mut p = c;
                p[axis] += sign * tcfg.fd_step;
                probe.extend_from_slice(&p);
            }
        }
        let s = model.sdf_cano_plain(params, &probe, t_norm, ratio);
        let g = Vector3::new(
            (s[1] - s[2]) / (2.0 * tcfg.fd_step),
            (s[3] - s[4]) / (2.0 * tcfg.fd_step),
            (s[5] - s[6]) / (2.0 * tcfg.fd_step),
        );
        if g.norm() < 1e-8 {
            continue;
        }
        let (e1, e2) = plane_basis(&g);
        let d = e1 * theta.cos() + e2 * theta.sin();
        normal_a.extend_from_slice(&c);
        normal_b.extend_from_slice(&[
            c[0] + tcfg.perturb_radius * d.x,
            c[1] + tcfg.perturb_radius * d.y,
            c[2] + tcfg.perturb_radius * d.z,
        ]);
    }

    let f = vcfg.focal_ratio * res as f64;
    let half = res as f64 / 2.0;
    let intr = Intrinsics::new(f, f, half, half, res, res)?;
    let mut pixels = Vec::with_capacity(res * res);
    for y in 0..res {
        for x in 0..res {
            pixels.push((x as f64 + 0.5, y as f64 + 0.5));
        }
    }
    let rays = generate_rays(&pose, &intr, &pixels, rcfg.bound_radius);
    let mut ray_dirs = Vec::with_capacity(res * res * 3);
    for r in &rays {
        ray_dirs.extend_from_slice(&[r.dir.x, r.dir.y, r.dir.z]);
    }
    let plan = plan_samples(&rays, occ, rcfg.step_size, rng);

    let keyframe_idx = kf.nearest(frame_idx);
    let ref_polar = to_polar(&ref_pose.translation, &Vector3::zeros());
    let delta_pose = [
        polar.radius - ref_polar.radius,
        polar.polar - ref_polar.polar,
        wrap_angle(polar.azimuth - ref_polar.azimuth),
    ];
    let w_hat = sds_weight(schedule, timestep, &ref_pose.translation, &pose.translation)?;

    Ok(VirtualPlan {
        plan,
        t_norm,
        res,
        pose,
        shade: ShadeParams {
            mode,
            light_dir: [light.x, light.y, light.z],
            ambient: vcfg.ambient,
            fd_eps: tcfg.fd_step,
        },
        bg,
        timestep,
        w_hat,
        delta_pose,
        keyframe_idx,
        ray_dirs,
        reg_points,
        normal_a,
        normal_b,
    })
}

/// Evaluates one virtual-view batch: the two-pass distillation term plus the
/// canonical regularizers, in ray chunks, accumulating into `grads`.
///
/// The noise draw consumes exactly `3·latent_h·latent_w` normal samples from
/// `rng`, after which the evaluation is deterministic.
#[allow(clippy::too_many_arguments)]
pub fn virtual_loss_chunks(
    model: &SceneModel,
    params: &ParamStore,
    vp: &VirtualPlan,
    kf: &KeyframeCache,
    codec: &LatentCodec,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    guidance: f64,
    weights: &LossWeights,
    ratio: f64,
    beta_floor: f64,
    chunk: usize,
    rng: &mut ChaCha20Rng,
    grads: &mut GradStore,
) -> Result<LossReport> {
    assert!(chunk > 0);
    let res = vp.res;
    let n_rays = res * res;
    assert_eq!(vp.plan.n_rays(), n_rays);
    let mut report = LossReport::default();

    // Pass A: value-only render of the full image, chunk by chunk. The same
    // tape forward as pass B guarantees bit-identical pixels.
    let mut image = vec![0.0; n_rays * 3];
    let mut a = 0;
    while a < n_rays {
        let b = (a + chunk).min(n_rays);
        let sub = slice_plan(&vp.plan, a, b);
        let mut tape = Tape::new(params);
        let out = render_plan_shaded_tape(&mut tape, model, &sub, vp.t_norm, ratio, beta_floor, &vp.shade);
        let fin = tape.bg_composite(out.rgb, out.mass, vp.bg);
        image[a * 3..b * 3].copy_from_slice(tape.value(fin));
        a = b;
    }

    let (lh, lw) = codec.latent_hw(res, res)?;
    let groups = codec.pixel_groups(res, res)?;
    let z_pm = codec.encode_pm(&image, res, res)?;
    let z_cm = pixel_to_channel_major(&z_pm, lh * lw);
    let outcome = sds_latent_pass(
        &z_cm,
        [3, lh, lw],
        schedule,
        vp.timestep,
        denoiser,
        &kf.latents[vp.keyframe_idx],
        vp.delta_pose,
        guidance,
        vp.w_hat,
        rng,
    )?;
    report.sds = outcome.value;

    // The latent is a per-cell pixel mean, so the surrogate's pixel-space
    // coefficients are constant: 2·λ·grad/|cell|.
    let cells = lh * lw;
    let mut counts = vec![0.0f64; cells];
    for &g in &groups {
        counts[g as usize] += 1.0;
    }
    let mut coeff = vec![0.0; n_rays * 3];
    for (p, &g) in groups.iter().enumerate() {
        let g = g as usize;
        for c in 0..3 {
            coeff[p * 3 + c] = 2.0 * weights.sds * outcome.grad_cm[c * cells + g] / counts[g];
        }
    }

    // Pass B: the same chunks on tape, with the frozen coefficients applied
    // as a linear functional, plus the per-sample orientation term.
    let n_samples_total = vp.plan.n_samples();
    let mut a = 0;
    while a < n_rays {
        let b = (a + chunk).min(n_rays);
        let sub = slice_plan(&vp.plan, a, b);
        let s0 = vp.plan.starts[a] as usize;
        let s1 = vp.plan.starts[b] as usize;
        let mut tape = Tape::new(params);
        let out = render_plan_shaded_tape(&mut tape, model, &sub, vp.t_norm, ratio, beta_floor, &vp.shade);
        let fin = tape.bg_composite(out.rgb, out.mass, vp.bg);
        let cvar = tape.constant(coeff[a * 3..b * 3].to_vec(), b - a, 3);
        let weighted = tape.mul_elem(fin, cvar);
        let mut total = tape.sum_all(weighted);

        let m = s1 - s0;
        if m > 0 && weights.ori > 0.0 {
            let deltas = tape.constant(sub.deltas.clone(), m, 1);
            let od = tape.mul_elem(out.sigma, deltas);
            let odc = tape.clamp(od, 0.0, MAX_OPTICAL_DEPTH);
            let neg = tape.scale(odc, -1.0);
            let e = tape.exp(neg);
            let negalpha = tape.add_const(e, -1.0);
            let alpha = tape.scale(negalpha, -1.0);
            let alpha_det = tape.detach(alpha);
            let (g, _) = model.sdf_fd_gradient_tape(
                &mut tape,
                &sub.positions,
                vp.t_norm,
                ratio,
                vp.shade.fd_eps,
                WarpMap::Canonical,
            );
            let nhat = tape.normalize_rows3(g, 1e-8);
            let mut dirs = Vec::with_capacity(m * 3);
            for r in a..b {
                let reps = (vp.plan.starts[r + 1] - vp.plan.starts[r]) as usize;
                for _ in 0..reps {
                    dirs.extend_from_slice(&vp.ray_dirs[r * 3..r * 3 + 3]);
                }
            }
            let dot = tape.row_dot_rows(nhat, dirs);
            let rl = tape.relu(dot);
            let sq = tape.square(rl);
            let w = tape.mul_elem(sq, alpha_det);
            let osum = tape.sum_all(w);
            let term = tape.scale(osum, 1.0 / n_samples_total as f64);
            report.ori += tape.value(term)[0];
            total = tape.axpy(1.0, total, weights.ori, term);
        }
        tape.backward(total, grads);
        a = b;
    }

    // Canonical probes: normal smoothness on the kept pairs, eikonal on all
    // probe points (a degenerate gradient counts as ‖∇s‖ = 0 there).
    {
        let mut tape = Tape::new(params);
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let n_pairs = vp.normal_a.len() / 3;
        let n_reg = vp.reg_points.len() / 3;
        if n_pairs > 0 {
            let mut both = vp.normal_a.clone();
            both.extend_from_slice(&vp.normal_b);
            let (g, _) = model.sdf_fd_gradient_tape(
                &mut tape,
                &both,
                vp.t_norm,
                ratio,
                vp.shade.fd_eps,
                WarpMap::Canonical,
            );
            let ga = tape.gather_rows(g, (0..n_pairs as u32).collect());
            let gb = tape.gather_rows(g, (n_pairs as u32..2 * n_pairs as u32).collect());
            let diff = tape.axpy(1.0, ga, -1.0, gb);
            let sq = tape.square(diff);
            let ssum = tape.sum_all(sq);
            let term = tape.scale(ssum, 1.0 / n_pairs as f64);
            report.normal += tape.value(term)[0];
            terms.push((term, weights.normal));
        }
        if n_reg > 0 {
            let (g, _) = model.sdf_fd_gradient_tape(
                &mut tape,
                &vp.reg_points,
                vp.t_norm,
                ratio,
                vp.shade.fd_eps,
                WarpMap::Canonical,
            );
            let gx = tape.slice_cols(g, 0, 1);
            let gy = tape.slice_cols(g, 1, 1);
            let gz = tape.slice_cols(g, 2, 1);
            let sx = tape.square(gx);
            let sy = tape.square(gy);
            let sz = tape.square(gz);
            let sxy = tape.axpy(1.0, sx, 1.0, sy);
            let ss = tape.axpy(1.0, sxy, 1.0, sz);
            let norm = tape.sqrt(ss);
            let dev = tape.add_const(norm, -1.0);
            let sq = tape.square(dev);
            let ssum = tape.sum_all(sq);
            let term = tape.scale(ssum, 1.0 / n_reg as f64);
            report.eik += tape.value(term)[0];
            terms.push((term, weights.eik));
        }
        if let Some(total) = weighted_total(&mut tape, &terms) {
            tape.backward(total, grads);
        }
    }

    report.finish(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_check_blocks, ParamId};
    use crate::fields::ModelConfig;
    use crate::geometry::{intersect_sphere, look_at};
    use crate::prior::{
        channel_to_pixel_major, quantize_f32, upcast_f64, Latent, ToyDenoiser, ToyTarget,
        ToyTargetSet,
    };
    use rand::SeedableRng;

    fn sphere_model() -> (SceneModel, ParamStore) {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let mut params = ParamStore::new();
        let model = SceneModel::new(&ModelConfig::small(), 6, &mut params, &mut rng);
        (model, params)
    }

    /// Rays across a 16×16 view of the initial sphere with analytic
    /// observations: λ-depth from the first sphere crossing, flat foreground
    /// color, binary mask.
    fn synthetic_obs(n: usize) -> (Vec<Ray>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let eye = Vector3::new(0.1, -1.7, 0.35);
        let pose = look_at(&eye, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let intr = Intrinsics::new(18.0, 18.0, 8.0, 8.0, 16, 16).unwrap();
        let pixels: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let x = (i * 7) % 16;
                let y = (i * 5 + 3) % 16;
                (x as f64 + 0.5, y as f64 + 0.5)
            })
            .collect();
        let rays = generate_rays(&pose, &intr, &pixels, 1.0);
        let mut rgb = Vec::new();
        let mut depth = Vec::new();
        let mut mask = Vec::new();
        for r in &rays {
            match intersect_sphere(&r.origin, &r.dir, 0.35) {
                Some((t0, _)) => {
                    rgb.extend_from_slice(&[0.7, 0.45, 0.25]);
                    depth.push(t0);
                    mask.push(1.0);
                }
                None => {
                    rgb.extend_from_slice(&[0.0, 0.0, 0.0]);
                    depth.push(0.0);
                    mask.push(0.0);
                }
            }
        }
        (rays, rgb, depth, mask)
    }

    fn real_plan_fixture(
        model: &SceneModel,
        params: &ParamStore,
        n: usize,
        seed: u64,
    ) -> (RealPlan, RenderConfig, TruncationConfig) {
        let (rays, rgb, depth, mask) = synthetic_obs(n);
        let obs = RealObs { rays: &rays, rgb: &rgb, depth: &depth, mask: &mask };
        let rcfg = RenderConfig { occupancy_res: 8, ..Default::default() };
        let tcfg = TruncationConfig::default();
        let occ = OccupancyGrid::new_full(8, 1.0);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let rp = plan_real_batch(model, params, &obs, &occ, 0.4, 1.0, &rcfg, &tcfg, 0.6, &mut rng);
        (rp, rcfg, tcfg)
    }

    #[test]
    fn weights_validate_rejects_negatives() {
        assert!(LossWeights::default().validate().is_ok());
        let mut w = LossWeights::default();
        w.smooth = -0.5;
        assert!(w.validate().is_err());
        w.smooth = f64::NAN;
        assert!(w.validate().is_err());
    }

    #[test]
    fn sdf_targets_follow_the_truncation_bands() {
        let (model, params) = sphere_model();
        let (rp, _, tcfg) = real_plan_fixture(&model, &params, 12, 3);
        assert!(!rp.sdf_idx.is_empty());
        // Re-derive each target from the plan geometry.
        let mut seen_free = 0;
        let mut seen_band = 0;
        for (i, &s) in rp.sdf_idx.iter().enumerate() {
            let s = s as usize;
            // Which ray owns this sample?
            let r = (0..rp.plan.n_rays())
                .find(|&r| {
                    (rp.plan.starts[r] as usize) <= s && s < (rp.plan.starts[r + 1] as usize)
                })
                .unwrap();
            assert!(rp.mask[r] > 0.5 && rp.depth[r] > 0.0, "supervised sample on invalid ray");
            let b = rp.depth[r] - rp.plan.dists[s];
            if b > tcfg.tr {
                assert_eq!(rp.sdf_target[i], tcfg.tr);
                seen_free += 1;
            } else {
                assert!(b >= -tcfg.tr, "included sample deeper than the truncation band");
                assert_eq!(rp.sdf_target[i], b);
                seen_band += 1;
            }
        }
        assert!(seen_free > 0 && seen_band > 0, "both branches should occur");
        // Samples beyond the far side of the band are excluded: every valid
        // sample deeper than tr behind the surface is absent from the list.
        for r in 0..rp.plan.n_rays() {
            if !(rp.mask[r] > 0.5 && rp.depth[r] > 0.0) {
                continue;
            }
            for s in rp.plan.starts[r] as usize..rp.plan.starts[r + 1] as usize {
                if rp.depth[r] - rp.plan.dists[s] < -tcfg.tr {
                    assert!(!rp.sdf_idx.contains(&(s as u32)));
                }
            }
        }
    }

    #[test]
    fn smooth_probes_sit_in_the_tangent_plane() {
        let (model, params) = sphere_model();
        let (rp, _, tcfg) = real_plan_fixture(&model, &params, 16, 5);
        let n = rp.smooth_a.len() / 3;
        assert!(n > 0);
        for i in 0..n {
            let a = Vector3::new(rp.smooth_a[i * 3], rp.smooth_a[i * 3 + 1], rp.smooth_a[i * 3 + 2]);
            let b = Vector3::new(rp.smooth_b[i * 3], rp.smooth_b[i * 3 + 1], rp.smooth_b[i * 3 + 2]);
            let d = b - a;
            assert!((d.norm() - tcfg.perturb_radius).abs() < 1e-12, "offset length");
            // Perpendicular to the plain FD gradient at the center.
            let mut probe = vec![a.x, a.y, a.z];
            for axis in 0..3 {
                for sign in [1.0f64, -1.0] {
                    let mut p = [a.x, a.y, a.z];
                    p[axis] += sign * tcfg.fd_step;
                    probe.extend_from_slice(&p);
                }
            }
            let s = model.sdf_obs_plain(&params, &probe, rp.t_norm, 1.0);
            let g = Vector3::new(
                (s[1] - s[2]) / (2.0 * tcfg.fd_step),
                (s[3] - s[4]) / (2.0 * tcfg.fd_step),
                (s[5] - s[6]) / (2.0 * tcfg.fd_step),
            );
            assert!(d.dot(&g).abs() < 1e-9 * g.norm().max(1.0), "offset not tangent");
        }
    }

    #[test]
    fn chunked_real_losses_match_a_plain_recomputation() {
        let (model, params) = sphere_model();
        let (rp, rcfg, _) = real_plan_fixture(&model, &params, 24, 7);
        let weights = LossWeights::default();
        let mut grads = GradStore::zeros_like(&params);
        let report =
            real_loss_chunks(&model, &params, &rp, &weights, 1.0, rcfg.beta_floor, 5, &mut grads)
                .unwrap();

        let (rgb, depth, mass) =
            crate::render::render_plan_plain(&model, &params, &rp.plan, rp.t_norm, 1.0, rcfg.beta_floor);
        let n_rays = rp.plan.n_rays();
        let masked: Vec<usize> = (0..n_rays).filter(|&r| rp.mask[r] > 0.5).collect();
        let valid: Vec<usize> =
            (0..n_rays).filter(|&r| rp.mask[r] > 0.5 && rp.depth[r] > 0.0).collect();
        let mut color = 0.0;
        for &r in &masked {
            for c in 0..3 {
                color += (rgb[r * 3 + c] - rp.rgb[r * 3 + c]).powi(2);
            }
        }
        color /= 3.0 * masked.len() as f64;
        let mut dep = 0.0;
        for &r in &valid {
            dep += (depth[r] - rp.depth[r]).powi(2);
        }
        dep /= valid.len() as f64;
        let mut bce = 0.0;
        for r in 0..n_rays {
            let m = mass[r].clamp(1e-5, 1.0 - 1e-5);
            bce -= rp.mask[r] * m.ln() + (1.0 - rp.mask[r]) * (1.0 - m).ln();
        }
        bce /= n_rays as f64;
        let s_all = model.sdf_obs_plain(&params, &rp.plan.positions, rp.t_norm, 1.0);
        let mut sdf = 0.0;
        for (i, &s) in rp.sdf_idx.iter().enumerate() {
            sdf += (s_all[s as usize] - rp.sdf_target[i]).powi(2);
        }
        sdf /= rp.sdf_idx.len() as f64;
        let n_surf = rp.surf_points.len() / 3;
        let s_surf = model.sdf_obs_plain(&params, &rp.surf_points, rp.t_norm, 1.0);
        let c_surf = model.color_obs_plain(&params, &rp.surf_points, rp.t_norm, 1.0);
        let mut surf = s_surf.iter().map(|s| s * s).sum::<f64>() / n_surf as f64;
        let mut csum = 0.0;
        for i in 0..n_surf * 3 {
            csum += (c_surf[i] - rp.surf_rgb[i]).powi(2);
        }
        surf += csum / (3.0 * n_surf as f64);
        let beta = model.beta(&params);

        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
        assert!(rel(report.color, color) < 1e-9, "color {} vs {color}", report.color);
        assert!(rel(report.depth, dep) < 1e-9, "depth {} vs {dep}", report.depth);
        assert!(rel(report.mask, bce) < 1e-9, "mask {} vs {bce}", report.mask);
        assert!(rel(report.sdf, sdf) < 1e-9, "sdf {} vs {sdf}", report.sdf);
        assert!(rel(report.surf, surf) < 1e-9, "surf {} vs {surf}", report.surf);
        assert!(rel(report.beta, beta) < 1e-12, "beta {} vs {beta}", report.beta);
        assert!(report.smooth > 0.0 && report.code >= 0.0);
        assert!(report.sds == 0.0 && report.ori == 0.0 && report.eik == 0.0);
        let total = 10.0 * color
            + dep
            + 0.1 * bce
            + 1000.0 * sdf
            + 100.0 * surf
            + report.smooth
            + report.code
            + 0.01 * beta;
        assert!(rel(report.total, total) < 1e-9);
    }

    #[test]
    fn code_term_matches_a_hand_computed_laplacian() {
        let (model, mut params) = sphere_model();
        // Give the coarsest temporal level a known profile.
        let level = 0;
        let id = model.temporal.blocks[level];
        let feat = model.temporal.feat;
        let nodes = params.block(id).data.len() / feat;
        for k in 0..nodes {
            for f in 0..feat {
                params.block_mut(id).data[k * feat + f] = (k * k) as f64 * 0.1;
            }
        }
        let (rp, rcfg, _) = real_plan_fixture(&model, &params, 8, 11);
        // Only the code term matters here; a window of 0.6 t-units was used.
        let mut grads = GradStore::zeros_like(&params);
        let report = real_loss_chunks(
            &model,
            &params,
            &rp,
            &LossWeights::default(),
            1.0,
            rcfg.beta_floor,
            64,
            &mut grads,
        )
        .unwrap();
        // For the quadratic profile 0.1k², the discrete Laplacian is a
        // constant 0.2 per node and feature, so each level with triples
        // contributes mean (0.2)² = 0.04 — unless other levels differ.
        let mut expect = 0.0;
        for (level, triples) in &rp.code_triples {
            if triples.is_empty() {
                continue;
            }
            let data = &params.block(model.temporal.blocks[*level]).data;
            let mut sum = 0.0;
            for &(a, b, c) in triples {
                for f in 0..feat {
                    let lap = 2.0 * data[b as usize * feat + f]
                        - data[a as usize * feat + f]
                        - data[c as usize * feat + f];
                    sum += lap * lap;
                }
            }
            expect += sum / (triples.len() * feat) as f64;
        }
        assert!(expect > 0.0);
        assert!((report.code - expect).abs() < 1e-12 * expect.max(1.0));
        // The hand profile shows up for the coarse level: 0.04 per feature
        // mean if that level has triples in the window.
        if rp.code_triples.iter().any(|(l, t)| *l == 0 && !t.is_empty()) {
            assert!(report.code >= 0.04 - 1e-9);
        }
    }

    #[test]
    fn real_gradients_match_finite_differences() {
        let (model, mut params) = sphere_model();
        let (rp, rcfg, _) = real_plan_fixture(&model, &params, 10, 13);
        // Unit weights: the λ's are linear scalars on each term, and the
        // production values (λ_sdf = 1000) amplify the h² truncation error
        // of the central difference well past the tolerance.
        let weights = LossWeights {
            color: 1.0,
            depth: 1.0,
            mask: 1.0,
            sdf: 1.0,
            surf: 1.0,
            smooth: 1.0,
            code: 1.0,
            beta: 1.0,
            ..LossWeights::default()
        };
        let value = |p: &ParamStore| -> f64 {
            let mut g = GradStore::zeros_like(p);
            real_loss_chunks(&model, p, &rp, &weights, 1.0, rcfg.beta_floor, 4, &mut g)
                .unwrap()
                .total
        };
        let mut grads = GradStore::zeros_like(&params);
        let _ = real_loss_chunks(&model, &params, &rp, &weights, 1.0, rcfg.beta_floor, 4, &mut grads)
            .unwrap();
        // Blocks that move warped positions need a tiny step (the hash is
        // piecewise trilinear); value-path blocks use a larger one to stay
        // clear of roundoff. Biases keep the sweeps small.
        let checks: Vec<(&str, ParamId, f64)> = vec![
            ("deform", model.deform_layers.last().unwrap().0, 1e-6),
            ("topo", model.topo_layers.last().unwrap().0, 1e-6),
            ("sdf bias", model.sdf_layers[0].1, 1e-4),
            ("color bias", model.color_layers[0].1, 1e-4),
            ("temporal", model.temporal.blocks[0], 1e-6),
            ("rho", model.rho, 1e-5),
        ];
        for (name, b, h) in checks {
            let worst = fd_check_blocks(&mut params, &grads, &[b], h, 1e-5, value);
            assert!(worst < 1e-4, "{name}: worst relative error {worst:.3e}");
        }
    }

    #[test]
    fn chunk_size_does_not_change_the_losses() {
        let (model, params) = sphere_model();
        let (rp, rcfg, _) = real_plan_fixture(&model, &params, 20, 17);
        let weights = LossWeights::default();
        let mut g1 = GradStore::zeros_like(&params);
        let r1 = real_loss_chunks(&model, &params, &rp, &weights, 1.0, rcfg.beta_floor, 3, &mut g1)
            .unwrap();
        let mut g2 = GradStore::zeros_like(&params);
        let r2 =
            real_loss_chunks(&model, &params, &rp, &weights, 1.0, rcfg.beta_floor, 4096, &mut g2)
                .unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
        assert!(rel(r1.color, r2.color) < 1e-12);
        assert!(rel(r1.sdf, r2.sdf) < 1e-12);
        assert!(rel(r1.total, r2.total) < 1e-12);
        for (ba, bb) in g1.blocks().iter().zip(g2.blocks().iter()) {
            let na: f64 = ba.iter().map(|x| x * x).sum::<f64>().sqrt();
            let d: f64 =
                ba.iter().zip(bb.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(d <= 1e-10 * na.max(1e-6), "chunked gradients diverge: {d:.3e}");
        }
    }

    #[test]
    fn empty_foreground_zeroes_the_masked_terms() {
        let (model, params) = sphere_model();
        let (rays, _, _, _) = synthetic_obs(6);
        let rgb = vec![0.0; rays.len() * 3];
        let depth = vec![0.0; rays.len()];
        let mask = vec![0.0; rays.len()];
        let obs = RealObs { rays: &rays, rgb: &rgb, depth: &depth, mask: &mask };
        let rcfg = RenderConfig::default();
        let occ = OccupancyGrid::new_full(8, 1.0);
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let rp = plan_real_batch(
            &model,
            &params,
            &obs,
            &occ,
            0.0,
            1.0,
            &rcfg,
            &TruncationConfig::default(),
            0.5,
            &mut rng,
        );
        assert!(rp.sdf_idx.is_empty() && rp.surf_points.is_empty() && rp.smooth_a.is_empty());
        let mut grads = GradStore::zeros_like(&params);
        let report = real_loss_chunks(
            &model,
            &params,
            &rp,
            &LossWeights::default(),
            1.0,
            rcfg.beta_floor,
            64,
            &mut grads,
        )
        .unwrap();
        assert_eq!(report.color, 0.0);
        assert_eq!(report.depth, 0.0);
        assert_eq!(report.sdf, 0.0);
        assert_eq!(report.surf, 0.0);
        assert_eq!(report.smooth, 0.0);
        // The mask term still pushes the rendered mass toward empty.
        assert!(report.mask > 0.0);
    }

    #[test]
    fn poisoned_parameters_abort_with_the_term_name() {
        let (model, mut params) = sphere_model();
        let (rp, rcfg, _) = real_plan_fixture(&model, &params, 8, 23);
        params.block_mut(model.rho).data[0] = f64::NAN;
        let mut grads = GradStore::zeros_like(&params);
        let err = real_loss_chunks(
            &model,
            &params,
            &rp,
            &LossWeights::default(),
            1.0,
            rcfg.beta_floor,
            64,
            &mut grads,
        )
        .unwrap_err();
        // The density path floors β, so a poisoned ρ first surfaces in the
        // term that reads it directly.
        match err {
            Error::NonFinite { term, .. } => assert_eq!(term, "beta"),
            other => panic!("expected a non-finite loss error, got {other}"),
        }
    }

    // ---- virtual steps ----------------------------------------------

    fn virtual_fixture(
        model: &SceneModel,
        params: &ParamStore,
        res: usize,
        n_reg: usize,
        seed: u64,
    ) -> (VirtualPlan, KeyframeCache, NoiseSchedule, RenderConfig) {
        let rcfg = RenderConfig::default();
        let occ = OccupancyGrid::new_full(8, 1.0);
        let schedule = NoiseSchedule::scaled_linear();
        let codec = LatentCodec::Identity;
        let ref_eye = Vector3::new(0.0, -1.8, 0.0);
        let ref_pose = look_at(&ref_eye, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        // One keyframe whose "image" is a flat gray reference.
        let kf = KeyframeCache::build(&[vec![0.5; res * res * 3]], res, res, 10, &codec).unwrap();
        let bounds = ViewBounds {
            radius: [1.6, 2.0],
            polar: [0.6, 1.4],
            azimuth: [-std::f64::consts::PI, std::f64::consts::PI],
        };
        let vcfg = VirtualViewConfig { n_reg, ..Default::default() };
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let vp = plan_virtual_batch(
            model,
            params,
            &bounds,
            &ref_pose,
            &kf,
            &schedule,
            4,
            0.4,
            [0.02, 0.5],
            res,
            1.0,
            &occ,
            &rcfg,
            &TruncationConfig::default(),
            &vcfg,
            &mut rng,
        )
        .unwrap();
        (vp, kf, schedule, rcfg)
    }

    fn gray_denoiser(kf: &KeyframeCache, res: usize, fill: f32) -> ToyDenoiser {
        let target =
            Latent::new([3, res, res], vec![fill; res * res * 3]).unwrap();
        ToyDenoiser::new(ToyTargetSet {
            entries: vec![ToyTarget {
                reference: kf.latents[0].clone(),
                delta_pose: [0.0; 3],
                target,
            }],
        })
    }

    #[test]
    fn virtual_plan_freezes_every_draw() {
        let (model, params) = sphere_model();
        let (vp1, _, _, _) = virtual_fixture(&model, &params, 8, 12, 29);
        let (vp2, _, _, _) = virtual_fixture(&model, &params, 8, 12, 29);
        assert_eq!(vp1.bg, vp2.bg);
        assert_eq!(vp1.timestep, vp2.timestep);
        assert_eq!(vp1.plan.positions, vp2.plan.positions);
        assert_eq!(vp1.reg_points, vp2.reg_points);
        assert_eq!(vp1.normal_b, vp2.normal_b);
        assert_eq!(vp1.shade.light_dir, vp2.shade.light_dir);
        let (vp3, _, _, _) = virtual_fixture(&model, &params, 8, 12, 30);
        assert_ne!(vp1.bg, vp3.bg);
        // The virtual camera looks inward from inside the bounds.
        let polar = to_polar(&vp1.pose.translation, &Vector3::zeros());
        assert!(polar.radius >= 1.6 && polar.radius <= 2.0);
        assert!(vp1.w_hat >= 0.0);
    }

    #[test]
    fn canonical_regularizers_skip_the_deformation_network() {
        let (model, params) = sphere_model();
        let (vp, kf, schedule, rcfg) = virtual_fixture(&model, &params, 8, 16, 31);
        let denoiser = gray_denoiser(&kf, 8, 0.2);
        // Only the canonical terms: the distillation weight is zeroed, so
        // nothing flows through the observation warp.
        let weights = LossWeights { sds: 0.0, ..LossWeights::default() };
        let mut grads = GradStore::zeros_like(&params);
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let report = virtual_loss_chunks(
            &model,
            &params,
            &vp,
            &kf,
            &LatentCodec::Identity,
            &denoiser,
            &schedule,
            5.0,
            &weights,
            1.0,
            rcfg.beta_floor,
            16,
            &mut rng,
            &mut grads,
        )
        .unwrap();
        assert!(report.eik > 0.0, "eikonal should see the probe points");
        assert!(report.ori >= 0.0 && report.normal >= 0.0);
        for &(w, b) in &model.deform_layers {
            assert!(grads.block(w).iter().all(|&g| g == 0.0), "deform weight gradient leaked");
            assert!(grads.block(b).iter().all(|&g| g == 0.0), "deform bias gradient leaked");
        }
        // Contrast: with the distillation term live, the warp does get
        // gradients (through the rendered virtual image).
        let mut grads2 = GradStore::zeros_like(&params);
        let mut rng2 = ChaCha20Rng::seed_from_u64(33);
        let _ = virtual_loss_chunks(
            &model,
            &params,
            &vp,
            &kf,
            &LatentCodec::Identity,
            &denoiser,
            &schedule,
            5.0,
            &LossWeights::default(),
            1.0,
            rcfg.beta_floor,
            16,
            &mut rng2,
            &mut grads2,
        )
        .unwrap();
        let leak: f64 = model
            .deform_layers
            .iter()
            .map(|&(w, _)| grads2.block(w).iter().map(|g| g.abs()).sum::<f64>())
            .sum();
        assert!(leak > 0.0, "distillation should reach the deformation network");
    }

    #[test]
    fn distillation_gradient_matches_the_closed_form_pullback() {
        let (model, params) = sphere_model();
        let res = 8;
        let (vp, kf, schedule, rcfg) = virtual_fixture(&model, &params, res, 0, 37);
        let denoiser = gray_denoiser(&kf, res, 0.35);
        let weights = LossWeights {
            sds: 1.0,
            ori: 0.0,
            normal: 0.0,
            eik: 0.0,
            ..LossWeights::default()
        };
        let mut grads = GradStore::zeros_like(&params);
        let mut rng = ChaCha20Rng::seed_from_u64(39);
        let report = virtual_loss_chunks(
            &model,
            &params,
            &vp,
            &kf,
            &LatentCodec::Identity,
            &denoiser,
            &schedule,
            5.0,
            &weights,
            1.0,
            rcfg.beta_floor,
            16,
            &mut rng,
            &mut grads,
        )
        .unwrap();
        assert!(report.sds > 0.0);

        // With the toy denoiser, ε̂-ε = √ᾱ/√(1-ᾱ)·(z-z*) independently of
        // the drawn noise, so the expected parameter gradient is the render
        // gradient pulled back through 2·ŵ·√ᾱ/√(1-ᾱ)·(z-z*).
        let n_rays = res * res;
        let mut image = vec![0.0; n_rays * 3];
        {
            let mut tape = Tape::new(&params);
            let out = render_plan_shaded_tape(&mut tape, &model, &vp.plan, vp.t_norm, 1.0, rcfg.beta_floor, &vp.shade);
            let fin = tape.bg_composite(out.rgb, out.mass, vp.bg);
            image.copy_from_slice(tape.value(fin));
        }
        let z_cm = pixel_to_channel_major(&image, n_rays);
        let zq_cm = upcast_f64(&quantize_f32(&z_cm));
        let zq_pm = channel_to_pixel_major(&zq_cm, n_rays);
        let ab = schedule.alpha_bar(vp.timestep);
        let factor = 2.0 * vp.w_hat * ab.sqrt() / (1.0 - ab).sqrt();
        let zstar = 0.35f32 as f64;
        let coeff: Vec<f64> = zq_pm.iter().map(|&z| factor * (z - zstar)).collect();
        let mut expect = GradStore::zeros_like(&params);
        {
            let mut tape = Tape::new(&params);
            let out = render_plan_shaded_tape(&mut tape, &model, &vp.plan, vp.t_norm, 1.0, rcfg.beta_floor, &vp.shade);
            let fin = tape.bg_composite(out.rgb, out.mass, vp.bg);
            let cv = tape.constant(coeff, n_rays, 3);
            let weighted = tape.mul_elem(fin, cv);
            let total = tape.sum_all(weighted);
            tape.backward(total, &mut expect);
        }
        for (ba, bb) in grads.blocks().iter().zip(expect.blocks().iter()) {
            let nb: f64 = bb.iter().map(|x| x * x).sum::<f64>().sqrt();
            let d: f64 =
                ba.iter().zip(bb.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(d <= 1e-4 * nb.max(1e-8), "pullback mismatch: {d:.3e} vs norm {nb:.3e}");
        }
    }

    #[test]
    fn virtual_losses_are_deterministic() {
        let (model, params) = sphere_model();
        let (vp, kf, schedule, rcfg) = virtual_fixture(&model, &params, 8, 8, 43);
        let denoiser = gray_denoiser(&kf, 8, 0.6);
        let run = || {
            let mut grads = GradStore::zeros_like(&params);
            let mut rng = ChaCha20Rng::seed_from_u64(45);
            let report = virtual_loss_chunks(
                &model,
                &params,
                &vp,
                &kf,
                &LatentCodec::Identity,
                &denoiser,
                &schedule,
                5.0,
                &LossWeights::default(),
                1.0,
                rcfg.beta_floor,
                16,
                &mut rng,
                &mut grads,
            )
            .unwrap();
            (report, grads)
        };
        let (r1, g1) = run();
        let (r2, g2) = run();
        assert_eq!(r1, r2);
        for (a, b) in g1.blocks().iter().zip(g2.blocks().iter()) {
            assert_eq!(a, b, "gradient bytes must not depend on hidden state");
        }
    }
}
