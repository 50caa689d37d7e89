//! Ray sampling and volume rendering.
//!
//! Rendering follows the VolSDF recipe: the SDF is mapped to density through
//! a Laplace CDF, `σ(s) = (1/β)·Ψ_β(-s)`, and colors/depths/masses are
//! front-to-back alpha-composited over uniform λ steps along each ray.
//!
//! Sampling is two-stage. A persistent [`OccupancyGrid`] marks the cells
//! that can contribute opacity at the current β (the Laplace tails are fat
//! early in training, so the skip threshold is *derived from β* rather than
//! fixed); [`plan_samples`] then walks each ray with one jittered uniform
//! stride, keeping samples in active cells. The resulting [`SamplePlan`] is
//! pure data: the differentiable pass re-renders exactly those positions, so
//! a training step is a deterministic function of the parameters given the
//! plan.

use crate::autodiff::{laplace_density, ParamStore, Tape, Var, MAX_OPTICAL_DEPTH};
use crate::error::{Error, Result};
use crate::fields::{SceneModel, WarpMap};
use crate::geometry::Ray;
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Rendering/sampling options.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RenderConfig {
    /// Scene bounding-sphere radius; rays are clipped to it.
    pub bound_radius: f64,
    /// λ stride between candidate samples.
    pub step_size: f64,
    /// Occupancy grid resolution per axis.
    pub occupancy_res: usize,
    /// Opacity per step below which a cell may be skipped.
    pub occupancy_alpha_eps: f64,
    /// How many frame times an occupancy refresh probes.
    pub occupancy_time_samples: usize,
    /// Density floor for β (backing `exp(ρ)` away from zero).
    pub beta_floor: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            bound_radius: 1.0,
            step_size: 0.01,
            occupancy_res: 64,
            occupancy_alpha_eps: 1e-5,
            occupancy_time_samples: 5,
            beta_floor: 1e-4,
        }
    }
}

/// SDF threshold below which a point can still contribute at least
/// `alpha_eps` opacity over one step of `delta` at sharpness `beta`:
/// solving `(0.5/β)·e^{-s/β}·δ = α_eps` for `s` gives
/// `τ = β·ln(δ / (2·β·α_eps))`.
pub fn occupancy_sdf_threshold(beta: f64, delta: f64, alpha_eps: f64) -> f64 {
    (beta * (delta / (2.0 * beta * alpha_eps)).ln()).max(0.0)
}

/// Binary occupancy over a cube grid spanning `[-bound, bound]³`.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    pub res: usize,
    pub bound: f64,
    active: Vec<bool>,
}

impl OccupancyGrid {
    /// Fully active grid (used before the first refresh).
    pub fn new_full(res: usize, bound: f64) -> Self {
        Self { res, bound, active: vec![true; res * res * res] }
    }

    #[inline]
    fn cell_index(&self, p: &[f64; 3]) -> Option<usize> {
        let res = self.res as f64;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let u = (p[a] + self.bound) / (2.0 * self.bound) * res;
            if !(0.0..res).contains(&u) {
                return None;
            }
            idx[a] = u as usize;
        }
        Some((idx[2] * self.res + idx[1]) * self.res + idx[0])
    }

    /// Whether the cell containing `p` is active; points outside the grid
    /// are inactive.
    #[inline]
    pub fn is_active(&self, p: &[f64; 3]) -> bool {
        match self.cell_index(p) {
            Some(i) => self.active[i],
            None => false,
        }
    }

    pub fn active_fraction(&self) -> f64 {
        self.active.iter().filter(|&&a| a).count() as f64 / self.active.len() as f64
    }

    /// The raw per-cell activity flags (x-fastest), for checkpointing.
    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    /// Replaces the activity flags (restoring a checkpoint).
    pub fn set_active_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        let want = self.res * self.res * self.res;
        if mask.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "occupancy mask has {} cells, grid needs {want}",
                mask.len()
            )));
        }
        self.active = mask;
        Ok(())
    }

    /// Re-marks the grid from the model's current SDF. A cell stays active
    /// if, at any probed frame time, its center `|SDF|` is below the
    /// β-derived threshold plus the cell diagonal — a conservative bound on
    /// the minimum over the cell, so no surface cell is ever missed — then
    /// the active set is dilated by `dilate` cells. Deep interior is pruned
    /// along with free space: rays saturate inside the surface shell, so
    /// samples past it carry no weight.
    pub fn refresh(
        &mut self,
        model: &SceneModel,
        params: &ParamStore,
        times: &[f64],
        ratio: f64,
        cfg: &RenderConfig,
        dilate: usize,
    ) {
        let beta = model.beta(params).max(cfg.beta_floor);
        let tau = occupancy_sdf_threshold(beta, cfg.step_size, cfg.occupancy_alpha_eps);
        let cell = 2.0 * self.bound / self.res as f64;
        let margin = tau + cell * 3.0f64.sqrt();
        let n = self.res;
        let mut centers = Vec::with_capacity(n * n * n * 3);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    centers.push(-self.bound + (x as f64 + 0.5) * cell);
                    centers.push(-self.bound + (y as f64 + 0.5) * cell);
                    centers.push(-self.bound + (z as f64 + 0.5) * cell);
                }
            }
        }
        self.active.fill(false);
        // Chunked evaluation keeps peak memory flat.
        const CHUNK: usize = 8192;
        for t in times {
            let mut off = 0;
            while off < n * n * n {
                let hi = (off + CHUNK).min(n * n * n);
                let sdf = model.sdf_obs_plain(params, &centers[off * 3..hi * 3], *t, ratio);
                for (k, s) in sdf.iter().enumerate() {
                    if s.abs() <= margin {
                        self.active[off + k] = true;
                    }
                }
                off = hi;
            }
        }
        for _ in 0..dilate {
            self.dilate_once();
        }
    }

    fn dilate_once(&mut self) {
        let n = self.res as isize;
        let src = self.active.clone();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let i = ((z * n + y) * n + x) as usize;
                    if src[i] {
                        continue;
                    }
                    'probe: for dz in -1..=1isize {
                        for dy in -1..=1isize {
                            for dx in -1..=1isize {
                                let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                                if nx < 0 || ny < 0 || nz < 0 || nx >= n || ny >= n || nz >= n {
                                    continue;
                                }
                                if src[((nz * n + ny) * n + nx) as usize] {
                                    self.active[i] = true;
                                    break 'probe;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Flattened per-sample data for a batch of rays. Rays with no active
/// samples still occupy a (empty) slot so outputs stay aligned with inputs.
#[derive(Debug, Clone, Default)]
pub struct SamplePlan {
    /// `m × 3` sample positions (world space).
    pub positions: Vec<f64>,
    /// λ step represented by each sample.
    pub deltas: Vec<f64>,
    /// λ distance of each sample from its ray origin.
    pub dists: Vec<f64>,
    /// Ray delimiters into the sample arrays; length = rays + 1.
    pub starts: Vec<u32>,
}

impl SamplePlan {
    pub fn n_rays(&self) -> usize {
        self.starts.len().saturating_sub(1)
    }

    pub fn n_samples(&self) -> usize {
        self.positions.len() / 3
    }

    /// Sample λ distances of one ray.
    pub fn ray_dists(&self, ray: usize) -> &[f64] {
        &self.dists[self.starts[ray] as usize..self.starts[ray + 1] as usize]
    }
}

/// Walks each ray from its near to far bound with stride `step_size` and one
/// uniform jitter draw per ray (consumed even for rays that miss the bounds,
/// keeping the RNG stream aligned), keeping samples whose cells are active.
pub fn plan_samples(
    rays: &[Ray],
    occ: &OccupancyGrid,
    step: f64,
    rng: &mut ChaCha20Rng,
) -> SamplePlan {
    let mut plan = SamplePlan::default();
    plan.starts.push(0);
    for ray in rays {
        let jitter: f64 = rng.gen::<f64>();
        if ray.hits_bounds() {
            let mut t = ray.near + jitter * step;
            while t < ray.far {
                let p = ray.point_at(t);
                let pa = [p.x, p.y, p.z];
                if occ.is_active(&pa) {
                    plan.positions.extend_from_slice(&pa);
                    plan.deltas.push(step);
                    plan.dists.push(t);
                }
                t += step;
            }
        }
        plan.starts.push(plan.positions.len() as u32 / 3);
    }
    plan
}

/// How sample colors are produced for a rendered view.
///
/// Real views always render `Albedo` (the color field is supervised against
/// observed pixels directly). Virtual views draw a mode per view so the
/// distillation prior sees geometry as well as texture: `Lambertian` shades
/// the albedo with a diffuse light, `Textureless` swaps the albedo for white
/// before shading, exposing pure shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadeMode {
    Albedo,
    Lambertian,
    Textureless,
}

impl ShadeMode {
    /// Draws a mode (one uniform draw): albedo with `p_albedo`, textureless
    /// with `p_textureless`, lambertian otherwise.
    pub fn draw(rng: &mut ChaCha20Rng, p_albedo: f64, p_textureless: f64) -> Self {
        let u: f64 = rng.gen();
        if u < p_albedo {
            ShadeMode::Albedo
        } else if u < p_albedo + p_textureless {
            ShadeMode::Textureless
        } else {
            ShadeMode::Lambertian
        }
    }
}

/// Per-view shading draw: mode, light direction, and ambient floor.
#[derive(Debug, Clone)]
pub struct ShadeParams {
    pub mode: ShadeMode,
    pub light_dir: [f64; 3],
    pub ambient: f64,
    /// Finite-difference step for the shading normals.
    pub fd_eps: f64,
}

/// Uniform direction on the hemisphere around `axis` (two uniform draws:
/// height along the axis, then angle). Used to place the light roughly on
/// the camera's side of the object.
pub fn sample_hemisphere_dir(axis: &Vector3<f64>, rng: &mut ChaCha20Rng) -> Vector3<f64> {
    let a = axis.normalize();
    let mut up = Vector3::new(0.0, 0.0, 1.0);
    if a.cross(&up).norm() < 1e-6 {
        up = Vector3::new(1.0, 0.0, 0.0);
    }
    let e1 = a.cross(&up).normalize();
    let e2 = a.cross(&e1);
    let z: f64 = rng.gen::<f64>();
    let phi: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    let r = (1.0 - z * z).max(0.0).sqrt();
    e1 * (r * phi.cos()) + e2 * (r * phi.sin()) + a * z
}

/// Diffuse shading of one sample: `albedo·(ambient + (1-ambient)·max(0, n̂·l))`,
/// clamped to `[0,1]`. A zero normal (degenerate SDF gradient) shades
/// ambient-only.
pub fn shade_color(albedo: [f64; 3], normal: &Vector3<f64>, light: &Vector3<f64>, ambient: f64) -> [f64; 3] {
    let n = normal.norm();
    let lambert = if n > 0.0 { (normal.dot(light) / n).max(0.0) } else { 0.0 };
    let gain = ambient + (1.0 - ambient) * lambert;
    [
        (albedo[0] * gain).clamp(0.0, 1.0),
        (albedo[1] * gain).clamp(0.0, 1.0),
        (albedo[2] * gain).clamp(0.0, 1.0),
    ]
}

/// Tape counterpart of [`shade_color`] over `m` samples. `normal` is the
/// (unnormalized) SDF gradient; rows below the normalization floor come out
/// as zero normals and thus shade ambient-only.
pub fn shade_tape(tape: &mut Tape, albedo: Var, normal: Var, light: [f64; 3], ambient: f64) -> Var {
    let (m, _) = tape.shape(albedo);
    let nhat = tape.normalize_rows3(normal, 1e-8);
    let mut dirs = Vec::with_capacity(m * 3);
    for _ in 0..m {
        dirs.extend_from_slice(&light);
    }
    let dot = tape.row_dot_rows(nhat, dirs);
    let lambert = tape.relu(dot);
    let scaled = tape.scale(lambert, 1.0 - ambient);
    let gain = tape.add_const(scaled, ambient);
    let gain3 = tape.concat_cols(&[gain, gain, gain]);
    let lit = tape.mul_elem(albedo, gain3);
    tape.clamp(lit, 0.0, 1.0)
}

/// Differentiable render of a sample plan. Returned vars are per-ray unless
/// noted; `sdf`/`color`/`sigma`/`warped`/`ambient` are per-sample.
pub struct RenderedBatch {
    /// Per-ray composited color, before any background.
    pub rgb: Var,
    /// Per-ray expected λ depth.
    pub depth: Var,
    /// Per-ray accumulated mass (opacity).
    pub mass: Var,
    pub sdf: Var,
    pub color: Var,
    pub sigma: Var,
    pub warped: Var,
    pub ambient: Var,
}

/// Runs the field and compositing on a plan at frame time `t_norm`.
pub fn render_plan_tape(
    tape: &mut Tape,
    model: &SceneModel,
    plan: &SamplePlan,
    t_norm: f64,
    ratio: f64,
    beta_floor: f64,
) -> RenderedBatch {
    let m = plan.n_samples();
    let x = tape.constant(plan.positions.clone(), m, 3);
    let out = model.forward_obs_tape(tape, x, t_norm, ratio);
    let sigma = tape.density_from_sdf(out.sdf, model.rho, beta_floor);
    let comp = tape.composite(
        sigma,
        out.color,
        plan.deltas.clone(),
        plan.dists.clone(),
        plan.starts.clone(),
    );
    let rgb = tape.slice_cols(comp, 0, 3);
    let depth = tape.slice_cols(comp, 3, 1);
    let mass = tape.slice_cols(comp, 4, 1);
    RenderedBatch {
        rgb,
        depth,
        mass,
        sdf: out.sdf,
        color: out.color,
        sigma,
        warped: out.warped,
        ambient: out.ambient,
    }
}

/// Differentiable shaded render of a plan, used for virtual views. `Albedo`
/// mode produces exactly [`render_plan_tape`]'s colors; the lit modes shade
/// each sample's albedo (white albedo for `Textureless`) with normals taken
/// from a finite-difference SDF gradient at the sample, so gradients flow
/// into the geometry through the shading as well as the density.
pub fn render_plan_shaded_tape(
    tape: &mut Tape,
    model: &SceneModel,
    plan: &SamplePlan,
    t_norm: f64,
    ratio: f64,
    beta_floor: f64,
    shade: &ShadeParams,
) -> RenderedBatch {
    let m = plan.n_samples();
    let x = tape.constant(plan.positions.clone(), m, 3);
    let out = model.forward_obs_tape(tape, x, t_norm, ratio);
    let shaded = match shade.mode {
        ShadeMode::Albedo => out.color,
        ShadeMode::Lambertian | ShadeMode::Textureless => {
            let (grad, _) = model.sdf_fd_gradient_tape(
                tape,
                &plan.positions,
                t_norm,
                ratio,
                shade.fd_eps,
                WarpMap::Observation,
            );
            let albedo = if shade.mode == ShadeMode::Textureless {
                tape.constant(vec![1.0; m * 3], m, 3)
            } else {
                out.color
            };
            shade_tape(tape, albedo, grad, shade.light_dir, shade.ambient)
        }
    };
    let sigma = tape.density_from_sdf(out.sdf, model.rho, beta_floor);
    let comp = tape.composite(
        sigma,
        shaded,
        plan.deltas.clone(),
        plan.dists.clone(),
        plan.starts.clone(),
    );
    let rgb = tape.slice_cols(comp, 0, 3);
    let depth = tape.slice_cols(comp, 3, 1);
    let mass = tape.slice_cols(comp, 4, 1);
    RenderedBatch {
        rgb,
        depth,
        mass,
        sdf: out.sdf,
        color: shaded,
        sigma,
        warped: out.warped,
        ambient: out.ambient,
    }
}

/// Value-only render of a plan: per-ray `(rgb, depth, mass)`, identical math
/// to the tape path.
pub fn render_plan_plain(
    model: &SceneModel,
    params: &ParamStore,
    plan: &SamplePlan,
    t_norm: f64,
    ratio: f64,
    beta_floor: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (warped, ambient) = model.warp_plain(params, &plan.positions, t_norm, ratio);
    let (sdf, feat) = model.geometry_plain(params, &warped, &ambient, ratio);
    let color = model.color_plain(params, &warped, &feat, ratio);
    let beta = model.beta(params).max(beta_floor);
    let sigma: Vec<f64> = sdf.iter().map(|&s| laplace_density(s, beta)).collect();
    composite_plain(&sigma, &color, &plan.deltas, &plan.dists, &plan.starts)
}

/// Front-to-back compositing, shared by value-only paths. Returns per-ray
/// `(rgb, depth, mass)`.
pub fn composite_plain(
    sigma: &[f64],
    color: &[f64],
    deltas: &[f64],
    dists: &[f64],
    starts: &[u32],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rays = starts.len() - 1;
    let mut rgb = vec![0.0; rays * 3];
    let mut depth = vec![0.0; rays];
    let mut mass = vec![0.0; rays];
    for r in 0..rays {
        let (s0, s1) = (starts[r] as usize, starts[r + 1] as usize);
        let mut trans = 1.0;
        for i in s0..s1 {
            let alpha = 1.0 - (-(sigma[i] * deltas[i]).min(MAX_OPTICAL_DEPTH)).exp();
            let w = trans * alpha;
            rgb[r * 3] += w * color[i * 3];
            rgb[r * 3 + 1] += w * color[i * 3 + 1];
            rgb[r * 3 + 2] += w * color[i * 3 + 2];
            depth[r] += w * dists[i];
            mass[r] += w;
            trans *= 1.0 - alpha;
        }
    }
    (rgb, depth, mass)
}

/// Renders a full image (row-major pixels) without gradients. Pixel rays use
/// pixel centers. Returns `(rgb, depth, mass)` over `width*height` pixels;
/// `bg` fills the remaining transmittance.
#[allow(clippy::too_many_arguments)]
pub fn render_image_plain(
    model: &SceneModel,
    params: &ParamStore,
    pose: &crate::geometry::RigidPose,
    intr: &crate::geometry::Intrinsics,
    t_norm: f64,
    ratio: f64,
    occ: &OccupancyGrid,
    cfg: &RenderConfig,
    bg: [f64; 3],
    rng: &mut ChaCha20Rng,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (w, h) = (intr.width, intr.height);
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            pixels.push((x as f64 + 0.5, y as f64 + 0.5));
        }
    }
    let rays = crate::geometry::generate_rays(pose, intr, &pixels, cfg.bound_radius);
    // Chunk over rays to bound the sample buffers.
    const RAY_CHUNK: usize = 1024;
    let mut rgb = vec![0.0; w * h * 3];
    let mut depth = vec![0.0; w * h];
    let mut mass = vec![0.0; w * h];
    let mut off = 0;
    while off < rays.len() {
        let hi = (off + RAY_CHUNK).min(rays.len());
        let plan = plan_samples(&rays[off..hi], occ, cfg.step_size, rng);
        let (crgb, cdepth, cmass) = render_plan_plain(model, params, &plan, t_norm, ratio, cfg.beta_floor);
        for r in 0..hi - off {
            for ch in 0..3 {
                rgb[(off + r) * 3 + ch] = crgb[r * 3 + ch] + (1.0 - cmass[r]) * bg[ch];
            }
            depth[off + r] = cdepth[r];
            mass[off + r] = cmass[r];
        }
        off = hi;
    }
    (rgb, depth, mass)
}

/// Validates that a plan and a per-ray target buffer agree on ray count.
pub fn ensure_ray_count(plan: &SamplePlan, targets: usize, what: &str) -> Result<()> {
    if plan.n_rays() != targets {
        return Err(Error::ShapeMismatch(format!(
            "{what}: plan has {} rays, targets have {targets}",
            plan.n_rays()
        )));
    }
    Ok(())
}
