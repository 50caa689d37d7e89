//! Finite-difference validation of every training-loss gradient.
//!
//! Reverse-mode gradients are the part of this crate most likely to rot
//! silently: an off-by-one in a tape rule still trains, just worse. This
//! module sweeps central finite differences over *every* parameter of a
//! deliberately tiny scene — once per loss term, with all other weights
//! zeroed — and reports the worst relative error per term. The `gradcheck`
//! CLI subcommand and the integration tests both run it, so the fixture
//! lives here rather than in test code.
//!
//! Two terms carry stop-gradients and need their frozen factors rebuilt
//! rather than naively differencing the reported value. The distillation
//! term's gradient is defined with the denoiser residual held fixed — and
//! the wire-precision (`f32`) rounding of that residual would swamp the
//! tolerance anyway — so the check freezes the residual coefficients at the
//! base point and differences the linear functional they define. The
//! orientation term detaches its per-sample opacity weights the same way,
//! so its check differences the weighted normal–ray objective with the
//! opacities pinned. Both surrogates are exactly the functions whose
//! gradients the training step applies.

use crate::autodiff::{fd_check_blocks, GradStore, ParamId, ParamStore, Tape, MAX_OPTICAL_DEPTH};
use crate::error::{Error, Result};
use crate::fields::{ModelConfig, SceneModel, WarpMap};
use crate::geometry::{generate_rays, intersect_sphere, look_at, Intrinsics, ViewBounds};
use crate::losses::{
    plan_real_batch, plan_virtual_batch, real_loss_chunks, virtual_loss_chunks, LossWeights,
    RealObs, RealPlan, TruncationConfig, VirtualPlan, VirtualViewConfig,
};
use crate::prior::{
    pixel_to_channel_major, sds_latent_pass, KeyframeCache, Latent, LatentCodec, NoiseSchedule,
    ToyDenoiser, ToyTarget, ToyTargetSet,
};
use crate::render::{render_plan_shaded_tape, OccupancyGrid, RenderConfig};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Worst finite-difference relative error for one loss term.
#[derive(Debug, Clone)]
pub struct TermCheck {
    pub term: &'static str,
    /// Maximum relative error over every parameter entry.
    pub rel_err: f64,
    /// L2 norm of the analytic gradient — evidence the check is not
    /// vacuous (a term with zero gradient "matches" trivially).
    pub grad_norm: f64,
}

/// The twelve weighted loss terms, in report order.
pub const ALL_TERMS: [&str; 12] = [
    "color", "depth", "mask", "sdf", "surf", "smooth", "ori", "normal", "eik", "code", "beta",
    "sds",
];

/// Model small enough for full-parameter sweeps: every table and layer is
/// cut to the bone but the architecture — both hash grids, the ambient
/// warp, temporal codes — is intact.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        deform_bands: 2,
        topo_bands: 2,
        ambient_dim: 2,
        warp_width: 8,
        warp_hidden: 1,
        decoder_width: 8,
        decoder_hidden: 1,
        feature_dim: 4,
        temporal_feat: 2,
        hash_levels: 2,
        hash_feat: 2,
        hash_log2_table: 8,
        hash_base_res: 4,
        hash_max_res: 8,
        ..ModelConfig::default()
    }
}

/// Step size per parameter block. Blocks that move warped positions need a
/// tiny step (the hash lookup is piecewise trilinear in position, so a
/// large sweep crosses cell boundaries); value-path blocks take a larger
/// one to stay clear of roundoff.
fn step_for(name: &str) -> f64 {
    if name.starts_with("deform") || name.starts_with("topo") || name.starts_with("temporal") {
        1e-6
    } else {
        1e-5
    }
}

/// FD floor: relative errors are measured against at least this magnitude,
/// so blocks a term genuinely does not touch compare as zero-vs-zero.
const REL_FLOOR: f64 = 1e-5;

fn sweep<F: FnMut(&ParamStore) -> f64>(
    term: &'static str,
    params: &mut ParamStore,
    grads: &GradStore,
    mut f: F,
) -> TermCheck {
    let mut rel_err = 0.0f64;
    for bi in 0..params.blocks().len() {
        let id = ParamId(bi);
        let h = step_for(&params.block(id).name);
        rel_err = rel_err.max(fd_check_blocks(params, grads, &[id], h, REL_FLOOR, &mut f));
    }
    let grad_norm =
        grads.blocks().iter().flat_map(|b| b.iter()).map(|g| g * g).sum::<f64>().sqrt();
    TermCheck { term, rel_err, grad_norm }
}

/// All weights zero except the named term.
fn only(term: &str) -> LossWeights {
    let mut w = LossWeights {
        color: 0.0,
        depth: 0.0,
        mask: 0.0,
        sdf: 0.0,
        surf: 0.0,
        smooth: 0.0,
        ori: 0.0,
        normal: 0.0,
        eik: 0.0,
        code: 0.0,
        beta: 0.0,
        sds: 0.0,
    };
    match term {
        "color" => w.color = 1.0,
        "depth" => w.depth = 1.0,
        "mask" => w.mask = 1.0,
        "sdf" => w.sdf = 1.0,
        "surf" => w.surf = 1.0,
        "smooth" => w.smooth = 1.0,
        "ori" => w.ori = 1.0,
        "normal" => w.normal = 1.0,
        "eik" => w.eik = 1.0,
        "code" => w.code = 1.0,
        "beta" => w.beta = 1.0,
        "sds" => w.sds = 1.0,
        other => unreachable!("unknown loss term {other}"),
    }
    w
}

/// Four rays — two through the initial sphere, two past it — with analytic
/// depth, color, and mask, planned once.
fn real_fixture(seed: u64) -> (SceneModel, ParamStore, RealPlan, RenderConfig) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let model = SceneModel::new(&tiny_model_config(), 5, &mut params, &mut rng);

    let eye = Vector3::new(0.15, -1.75, 0.3);
    let pose = look_at(&eye, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
    let intr = Intrinsics::new(4.5, 4.5, 2.0, 2.0, 4, 4).unwrap();
    let pixels = [(2.0, 2.0), (1.6, 2.4), (0.5, 0.5), (3.5, 0.5)];
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
    let obs = RealObs { rays: &rays, rgb: &rgb, depth: &depth, mask: &mask };
    // Step 0.25 over the unit ball gives eight samples per ray; a wide
    // truncation band (0.15 > half the step) guarantees banded samples on
    // every foreground ray, so the sdf term is exercised.
    let rcfg = RenderConfig { step_size: 0.25, occupancy_res: 8, ..Default::default() };
    let tcfg = TruncationConfig { tr: 0.15, n_smooth: 2, ..Default::default() };
    let occ = OccupancyGrid::new_full(8, 1.0);
    let rp = plan_real_batch(&model, &params, &obs, &occ, 0.4, 1.0, &rcfg, &tcfg, 0.6, &mut rng);
    (model, params, rp, rcfg)
}

/// A 2×2 virtual view (four rays) with regularizer probes, planned once,
/// plus the keyframe cache and toy denoiser it conditions on.
#[allow(clippy::type_complexity)]
fn virtual_fixture(
    seed: u64,
) -> (SceneModel, ParamStore, VirtualPlan, KeyframeCache, ToyDenoiser, NoiseSchedule, RenderConfig)
{
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let model = SceneModel::new(&tiny_model_config(), 5, &mut params, &mut rng);

    let res = 2;
    let codec = LatentCodec::Identity;
    let kf = KeyframeCache::build(&[vec![0.5; res * res * 3]], res, res, 10, &codec).unwrap();
    let ref_eye = Vector3::new(0.0, -1.8, 0.0);
    let ref_pose = look_at(&ref_eye, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
    let bounds = ViewBounds {
        radius: [1.6, 2.0],
        polar: [0.6, 1.4],
        azimuth: [-std::f64::consts::PI, std::f64::consts::PI],
    };
    let rcfg = RenderConfig { step_size: 0.25, occupancy_res: 8, ..Default::default() };
    let occ = OccupancyGrid::new_full(8, 1.0);
    let schedule = NoiseSchedule::scaled_linear();
    let vcfg = VirtualViewConfig { n_reg: 8, ..Default::default() };
    let vp = plan_virtual_batch(
        &model,
        &params,
        &bounds,
        &ref_pose,
        &kf,
        &schedule,
        0,
        0.3,
        [0.1, 0.4],
        res,
        1.0,
        &occ,
        &rcfg,
        &TruncationConfig { n_smooth: 2, ..Default::default() },
        &vcfg,
        &mut rng,
    )
    .expect("virtual plan on a fully active grid");

    let target = Latent::new([3, res, res], vec![0.35; res * res * 3]).unwrap();
    let denoiser = ToyDenoiser::new(ToyTargetSet {
        entries: vec![ToyTarget {
            reference: kf.latents[0].clone(),
            delta_pose: [0.0; 3],
            target,
        }],
    });
    (model, params, vp, kf, denoiser, schedule, rcfg)
}

/// Value-only render of the whole virtual plan (composited over its
/// background), bit-identical to the loss pipeline's image pass.
fn render_full(
    model: &SceneModel,
    params: &ParamStore,
    vp: &VirtualPlan,
    beta_floor: f64,
) -> Vec<f64> {
    let mut tape = Tape::new(params);
    let out = render_plan_shaded_tape(&mut tape, model, &vp.plan, vp.t_norm, 1.0, beta_floor, &vp.shade);
    let fin = tape.bg_composite(out.rgb, out.mass, vp.bg);
    tape.value(fin).to_vec()
}

/// Checks the eight real-view terms; each entry's analytic gradient is
/// compared against central differences of the isolated term.
pub fn check_real_terms(seed: u64) -> Result<Vec<TermCheck>> {
    let (model, mut params, rp, rcfg) = real_fixture(seed);
    let mut out = Vec::new();
    for term in ["color", "depth", "mask", "sdf", "surf", "smooth", "code", "beta"] {
        let w = only(term);
        let mut grads = GradStore::zeros_like(&params);
        real_loss_chunks(&model, &params, &rp, &w, 1.0, rcfg.beta_floor, 4096, &mut grads)?;
        let value = |p: &ParamStore| {
            let mut g = GradStore::zeros_like(p);
            real_loss_chunks(&model, p, &rp, &w, 1.0, rcfg.beta_floor, 4096, &mut g)
                .map(|r| r.total)
                .unwrap_or(f64::NAN)
        };
        out.push(sweep(term, &mut params, &grads, value));
    }
    Ok(out)
}

/// Checks the four virtual-view terms. The regularizers difference the
/// isolated term directly (the noise draw is reseeded identically, and
/// none of them depends on it); the distillation term differences its
/// frozen-coefficient linear functional as described in the module docs.
pub fn check_virtual_terms(seed: u64) -> Result<Vec<TermCheck>> {
    let (model, mut params, vp, kf, denoiser, schedule, rcfg) = virtual_fixture(seed);
    let codec = LatentCodec::Identity;
    let guidance = 3.0;
    let noise_seed = seed ^ 0x5eed;
    let mut out = Vec::new();

    for term in ["ori", "normal", "eik"] {
        let w = only(term);
        let mut grads = GradStore::zeros_like(&params);
        let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
        virtual_loss_chunks(
            &model, &params, &vp, &kf, &codec, &denoiser, &schedule, guidance, &w, 1.0,
            rcfg.beta_floor, 4096, &mut rng, &mut grads,
        )?;
        let value = |p: &ParamStore| {
            let mut g = GradStore::zeros_like(p);
            let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
            virtual_loss_chunks(
                &model, p, &vp, &kf, &codec, &denoiser, &schedule, guidance, &w, 1.0,
                rcfg.beta_floor, 4096, &mut rng, &mut g,
            )
            .map(|r| r.total)
            .unwrap_or(f64::NAN)
        };
        out.push(sweep(term, &mut params, &grads, value));
    }

    if vp.w_hat == 0.0 {
        return Err(Error::InvalidConfig(
            "the sampled virtual view coincides with the reference (ŵ = 0), so the \
             distillation check would be vacuous; change the seed"
                .into(),
        ));
    }
    let w = only("sds");
    let mut grads = GradStore::zeros_like(&params);
    let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
    virtual_loss_chunks(
        &model, &params, &vp, &kf, &codec, &denoiser, &schedule, guidance, &w, 1.0,
        rcfg.beta_floor, 4096, &mut rng, &mut grads,
    )?;
    // Rebuild the latent-space residual with the same noise draw and turn it
    // into per-pixel coefficients, exactly as the loss pipeline does.
    let res = vp.res;
    let image = render_full(&model, &params, &vp, rcfg.beta_floor);
    let (lh, lw) = codec.latent_hw(res, res)?;
    let groups = codec.pixel_groups(res, res)?;
    let z_pm = codec.encode_pm(&image, res, res)?;
    let z_cm = pixel_to_channel_major(&z_pm, lh * lw);
    let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
    let outcome = sds_latent_pass(
        &z_cm,
        [3, lh, lw],
        &schedule,
        vp.timestep,
        &denoiser,
        &kf.latents[vp.keyframe_idx],
        vp.delta_pose,
        guidance,
        vp.w_hat,
        &mut rng,
    )?;
    let cells = lh * lw;
    let mut counts = vec![0.0f64; cells];
    for &g in &groups {
        counts[g as usize] += 1.0;
    }
    let mut coeff = vec![0.0; res * res * 3];
    for (p, &g) in groups.iter().enumerate() {
        let g = g as usize;
        for c in 0..3 {
            coeff[p * 3 + c] = 2.0 * outcome.grad_cm[c * cells + g] / counts[g];
        }
    }
    let value = |p: &ParamStore| {
        let img = render_full(&model, p, &vp, rcfg.beta_floor);
        img.iter().zip(&coeff).map(|(a, b)| a * b).sum::<f64>()
    };
    out.push(sweep("sds", &mut params, &grads, value));
    Ok(out)
}

/// Runs the full suite and returns one entry per loss term, in
/// [`ALL_TERMS`] order.
pub fn check_all_terms(seed: u64) -> Result<Vec<TermCheck>> {
    let real = check_real_terms(seed)?;
    let virt = check_virtual_terms(seed)?;
    let mut out = Vec::with_capacity(12);
    for term in ALL_TERMS {
        let found = real
            .iter()
            .chain(virt.iter())
            .find(|c| c.term == term)
            .expect("every term is covered by one of the two fixtures");
        out.push(found.clone());
    }
    Ok(out)
}
