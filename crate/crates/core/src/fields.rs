//! The scene representation: deformation, topology, SDF, and color networks.
//!
//! An observed point `x` at frame time `t` maps to a *hyper-canonical* point
//! with two parts: a spatial part `x' = x + D(γ_d(x), V(t))` produced by the
//! deformation network, and an ambient part `a = T(γ_t(x), V(t))` produced by
//! the topology network (extra coordinates that let the canonical field model
//! topology changes without tearing). `V(t)` is a learned multi-resolution
//! time code, `γ` are windowed frequency encodings.
//!
//! The canonical field decodes geometry and appearance at `(x', a)`:
//! `(s, h) = f_g(x' ⊕ hash_g(x') ⊕ a)` and `c = sigmoid(f_c(hash_c(x') ⊕ h))`
//! with two independent multi-resolution hash grids.
//!
//! Initialization is load-bearing:
//! - The SDF decoder uses a geometric init so the field starts as an
//!   approximate sphere `s(x) ≈ ‖x‖ - r_init`; the hash and ambient columns
//!   of its first layer start at exactly zero so the sphere is undisturbed.
//! - The deformation and topology final layers are zero so the warp starts
//!   as the identity and the ambient coordinates at zero.
//! - The color head starts at 0.5 gray.

use crate::autodiff::{hash_encode_plain, HashGridMeta, ParamId, ParamStore, Tape, Var};
use crate::encoding::{active_hash_levels, freq_encode_tape, FreqEncoding, TemporalGrid};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Hyperparameters of the scene networks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Frequency bands for the deformation network input.
    pub deform_bands: usize,
    /// Frequency bands for the topology network input.
    pub topo_bands: usize,
    /// Ambient (extra canonical) coordinates.
    pub ambient_dim: usize,
    /// Hidden width of the deformation/topology MLPs.
    pub warp_width: usize,
    /// Hidden layers of the deformation/topology MLPs.
    pub warp_hidden: usize,
    /// Hidden width of the SDF/color decoders.
    pub decoder_width: usize,
    /// Hidden layers of the SDF/color decoders.
    pub decoder_hidden: usize,
    /// Width of the geometry feature vector `h` passed to the color head.
    pub feature_dim: usize,
    /// Features per temporal-grid node.
    pub temporal_feat: usize,
    /// Hash grid: number of levels.
    pub hash_levels: usize,
    /// Hash grid: features per level.
    pub hash_feat: usize,
    /// Hash grid: log2 of entries per level.
    pub hash_log2_table: u32,
    /// Hash grid: coarsest lattice resolution.
    pub hash_base_res: u32,
    /// Hash grid: finest lattice resolution.
    pub hash_max_res: u32,
    /// Radius of the initial SDF sphere.
    pub r_init: f64,
    /// Softplus sharpness in the SDF decoder.
    pub softplus_beta: f64,
    /// Initial β of the density transform, as `β = exp(ρ)`.
    pub beta_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            deform_bands: 6,
            topo_bands: 4,
            ambient_dim: 2,
            warp_width: 128,
            warp_hidden: 6,
            decoder_width: 64,
            decoder_hidden: 2,
            feature_dim: 16,
            temporal_feat: 16,
            hash_levels: 16,
            hash_feat: 2,
            hash_log2_table: 15,
            hash_base_res: 16,
            hash_max_res: 256,
            r_init: 0.35,
            softplus_beta: 100.0,
            beta_init: 0.1,
        }
    }
}

impl ModelConfig {
    /// Downsized configuration for tests: same structure, two orders of
    /// magnitude fewer parameters.
    pub fn small() -> Self {
        Self {
            deform_bands: 4,
            topo_bands: 3,
            warp_width: 32,
            warp_hidden: 2,
            decoder_width: 32,
            decoder_hidden: 1,
            feature_dim: 8,
            temporal_feat: 4,
            hash_levels: 8,
            hash_log2_table: 13,
            hash_max_res: 128,
            ..Self::default()
        }
    }
}

/// Which map spatial SDF derivatives differentiate through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpMap {
    /// Full warp: perturbing `x` moves through deformation + topology.
    Observation,
    /// Canonical probe: the spatial part is `x` itself (no displacement);
    /// only the ambient coordinates come from the topology network.
    Canonical,
}

enum Act {
    Relu,
    Softplus(f64),
}

/// All networks plus their parameter handles. Construction registers every
/// block in a fixed order — that order is the layout contract for the
/// optimizer and checkpoints.
#[derive(Debug, Clone)]
pub struct SceneModel {
    pub cfg: ModelConfig,
    pub freq_deform: FreqEncoding,
    pub freq_topo: FreqEncoding,
    pub temporal: TemporalGrid,
    pub hash_meta: HashGridMeta,
    pub deform_layers: Vec<(ParamId, ParamId)>,
    pub topo_layers: Vec<(ParamId, ParamId)>,
    pub sdf_layers: Vec<(ParamId, ParamId)>,
    pub color_layers: Vec<(ParamId, ParamId)>,
    pub hash_geo: ParamId,
    pub hash_col: ParamId,
    /// Density sharpness parameter; `β = exp(ρ)`.
    pub rho: ParamId,
}

fn he_normal(rng: &mut ChaCha20Rng, rows: usize, cols: usize, fan: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0f64).sqrt() / (fan as f64).sqrt()).unwrap();
    (0..rows * cols).map(|_| normal.sample(rng)).collect()
}

fn register_mlp(
    params: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    dims: &[usize],
    zero_last: bool,
) -> Vec<(ParamId, ParamId)> {
    let mut layers = Vec::new();
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let last = l == dims.len() - 2;
        let w = if last && zero_last {
            vec![0.0; fan_out * fan_in]
        } else {
            he_normal(rng, fan_out, fan_in, fan_in)
        };
        let wid = params.register(format!("{prefix}.{l}.weight"), fan_out, fan_in, w);
        let bid = params.register(format!("{prefix}.{l}.bias"), 1, fan_out, vec![0.0; fan_out]);
        layers.push((wid, bid));
    }
    layers
}

impl SceneModel {
    pub fn new(cfg: &ModelConfig, frames: usize, params: &mut ParamStore, rng: &mut ChaCha20Rng) -> Self {
        let freq_deform = FreqEncoding::new(cfg.deform_bands);
        let freq_topo = FreqEncoding::new(cfg.topo_bands);
        let temporal = TemporalGrid::register(
            params,
            "temporal",
            TemporalGrid::default_ladder(frames),
            cfg.temporal_feat,
            1e-3,
            rng,
        );
        let code_dim = temporal.output_dim();

        let mut warp_dims = vec![freq_deform.output_dim(3) + code_dim];
        warp_dims.extend(std::iter::repeat(cfg.warp_width).take(cfg.warp_hidden));
        warp_dims.push(3);
        let deform_layers = register_mlp(params, rng, "deform", &warp_dims, true);

        let mut topo_dims = vec![freq_topo.output_dim(3) + code_dim];
        topo_dims.extend(std::iter::repeat(cfg.warp_width).take(cfg.warp_hidden));
        topo_dims.push(cfg.ambient_dim);
        let topo_layers = register_mlp(params, rng, "topo", &topo_dims, true);

        let hash_meta = HashGridMeta::new(
            cfg.hash_levels,
            cfg.hash_feat,
            cfg.hash_log2_table,
            cfg.hash_base_res,
            cfg.hash_max_res,
        );
        let table_len = cfg.hash_levels * hash_meta.table_size;
        let tiny = |rng: &mut ChaCha20Rng| -> Vec<f64> {
            (0..table_len * cfg.hash_feat).map(|_| rng.gen_range(-1e-4..=1e-4)).collect()
        };
        let hash_geo = params.register("hash_geo", table_len, cfg.hash_feat, tiny(rng));

        let sdf_in = 3 + hash_meta.output_dim() + cfg.ambient_dim;
        let sdf_layers = Self::register_geometric_sdf(params, rng, cfg, sdf_in);

        let hash_col = params.register("hash_col", table_len, cfg.hash_feat, tiny(rng));

        let mut col_dims = vec![hash_meta.output_dim() + cfg.feature_dim];
        col_dims.extend(std::iter::repeat(cfg.decoder_width).take(cfg.decoder_hidden));
        col_dims.push(3);
        let color_layers = register_mlp(params, rng, "color", &col_dims, true);

        let rho = params.register("rho", 1, 1, vec![cfg.beta_init.ln()]);

        Self {
            cfg: cfg.clone(),
            freq_deform,
            freq_topo,
            temporal,
            hash_meta,
            deform_layers,
            topo_layers,
            sdf_layers,
            color_layers,
            hash_geo,
            hash_col,
            rho,
        }
    }

    /// SDF decoder with geometric initialization, so the decoded field
    /// starts as a sphere: `s(x) ≈ ‖x‖ - r_init` before any training.
    ///
    /// Construction: the first layer projects onto `width` evenly spread
    /// unit directions (a Fibonacci sphere), so the summed softplus
    /// responses approximate `‖x‖` with very small directional ripple —
    /// much smaller than i.i.d. Gaussian directions give at this width.
    /// Hidden layers start near the identity, and the output row's scale
    /// and bias are calibrated by least squares over a probe ball so the
    /// approximation holds across radii. Small Gaussian noise everywhere
    /// breaks symmetry for training. The first-layer columns that read
    /// hash features and ambient coordinates are exactly zero, so neither
    /// disturbs the initial sphere.
    fn register_geometric_sdf(
        params: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        cfg: &ModelConfig,
        in_dim: usize,
    ) -> Vec<(ParamId, ParamId)> {
        let width = cfg.decoder_width;
        let out_dim = 1 + cfg.feature_dim;
        let beta = cfg.softplus_beta;
        let dir_scale = 2.0;

        // First layer: scaled Fibonacci-sphere directions into the spatial
        // columns; hash/ambient columns exactly zero.
        let noise1 = Normal::new(0.0, 0.02 * dir_scale).unwrap();
        let mut w_first = vec![0.0; width * in_dim];
        let golden = std::f64::consts::PI * (1.0 + 5.0f64.sqrt());
        for j in 0..width {
            let z = 1.0 - 2.0 * (j as f64 + 0.5) / width as f64;
            let rho = (1.0 - z * z).sqrt();
            let ang = golden * (j as f64 + 0.5);
            let v = [rho * ang.cos(), rho * ang.sin(), z];
            for c in 0..3 {
                w_first[j * in_dim + c] = dir_scale * v[c] + noise1.sample(rng);
            }
        }

        // Middle layers: identity plus noise.
        let noise_mid = Normal::new(0.0, 0.02 / (width as f64).sqrt()).unwrap();
        let mut middles = Vec::new();
        for _ in 1..cfg.decoder_hidden {
            let mut w = vec![0.0; width * width];
            for r in 0..width {
                for c in 0..width {
                    w[r * width + c] = noise_mid.sample(rng) + if r == c { 1.0 } else { 0.0 };
                }
            }
            middles.push(w);
        }

        // Output row: per-unit weights c·(1+η_j); (c, d) calibrated below.
        let eta: Vec<f64> = {
            let n = Normal::new(0.0, 0.01).unwrap();
            (0..width).map(|_| n.sample(rng)).collect()
        };
        let feat_rows = Normal::new(0.0, (2.0f64).sqrt() / (width as f64).sqrt()).unwrap();
        let mut w_last = vec![0.0; out_dim * width];
        for r in 1..out_dim {
            for c in 0..width {
                w_last[r * width + c] = feat_rows.sample(rng);
            }
        }

        // Probe: forward a ball of points through the hidden stack, then fit
        // (c, d) minimizing Σ (c·ũ(x) + d - ‖x‖)² where ũ = Σ_j (1+η_j) h_j.
        let n_probe = 2048;
        let mut probe = Vec::with_capacity(n_probe * 3);
        while probe.len() < n_probe * 3 {
            let p = [
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
            ];
            if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 1.0 {
                probe.extend_from_slice(&p);
            }
        }
        let forward_hidden = |p: &[f64]| -> Vec<f64> {
            let mut h = vec![0.0; width];
            for j in 0..width {
                let mut acc = 0.0;
                for c in 0..3 {
                    acc += w_first[j * in_dim + c] * p[c];
                }
                h[j] = crate::autodiff::softplus_scaled(acc, beta);
            }
            for w in &middles {
                let mut nh = vec![0.0; width];
                for j in 0..width {
                    let mut acc = 0.0;
                    for k in 0..width {
                        acc += w[j * width + k] * h[k];
                    }
                    nh[j] = crate::autodiff::softplus_scaled(acc, beta);
                }
                h = nh;
            }
            h
        };
        let (mut suu, mut su, mut sur, mut sr) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n_probe {
            let p = &probe[i * 3..i * 3 + 3];
            let h = forward_hidden(p);
            let u: f64 = h.iter().zip(&eta).map(|(&hv, &e)| (1.0 + e) * hv).sum();
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            suu += u * u;
            su += u;
            sur += u * r;
            sr += r;
        }
        let m = n_probe as f64;
        let det = suu * m - su * su;
        let c_fit = (sur * m - su * sr) / det;
        let d_fit = (suu * sr - su * sur) / det;
        for j in 0..width {
            w_last[j] = c_fit * (1.0 + eta[j]);
        }

        // Register in layer order.
        let mut layers = Vec::new();
        let wid0 = params.register("sdf.0.weight", width, in_dim, w_first);
        let bid0 = params.register("sdf.0.bias", 1, width, vec![0.0; width]);
        layers.push((wid0, bid0));
        for (i, w) in middles.into_iter().enumerate() {
            let wid = params.register(format!("sdf.{}.weight", i + 1), width, width, w);
            let bid = params.register(format!("sdf.{}.bias", i + 1), 1, width, vec![0.0; width]);
            layers.push((wid, bid));
        }
        let l_last = cfg.decoder_hidden;
        let wid = params.register(format!("sdf.{l_last}.weight"), out_dim, width, w_last);
        let mut b_last = vec![0.0; out_dim];
        b_last[0] = d_fit - cfg.r_init;
        let bid = params.register(format!("sdf.{l_last}.bias"), 1, out_dim, b_last);
        layers.push((wid, bid));
        layers
    }

    /// Parameter blocks of the deformation and topology MLPs — the set held
    /// fixed during warm-up virtual steps.
    pub fn warp_mlp_param_ids(&self) -> Vec<ParamId> {
        self.deform_layers
            .iter()
            .chain(self.topo_layers.iter())
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    /// Blocks that are feature grids (hash tables and the temporal grid);
    /// the optimizer uses a smaller epsilon for these.
    pub fn grid_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.temporal.blocks.clone();
        ids.push(self.hash_geo);
        ids.push(self.hash_col);
        ids
    }

    // ---- tape forward ------------------------------------------------

    fn mlp_tape(&self, tape: &mut Tape, layers: &[(ParamId, ParamId)], x: Var, act: Act) -> Var {
        let mut h = x;
        for (l, &(w, b)) in layers.iter().enumerate() {
            h = tape.linear(h, w, Some(b));
            if l + 1 < layers.len() {
                h = match act {
                    Act::Relu => tape.relu(h),
                    Act::Softplus(beta) => tape.softplus_beta(h, beta),
                };
            }
        }
        h
    }

    /// Warps observed points into hyper-canonical space:
    /// returns `(x + D, a)` as `([m,3], [m,ambient_dim])`.
    pub fn warp_tape(&self, tape: &mut Tape, x: Var, t_norm: f64, ratio: f64) -> (Var, Var) {
        let (m, _) = tape.shape(x);
        let code1 = self.temporal.encode_tape(tape, t_norm);
        let code = tape.broadcast_row(code1, m);
        let ed = freq_encode_tape(tape, x, &self.freq_deform, ratio);
        let din = tape.concat_cols(&[ed, code]);
        let disp = self.mlp_tape(tape, &self.deform_layers, din, Act::Relu);
        let warped = tape.add(x, disp);
        let et = freq_encode_tape(tape, x, &self.freq_topo, ratio);
        let tin = tape.concat_cols(&[et, code]);
        let ambient = self.mlp_tape(tape, &self.topo_layers, tin, Act::Relu);
        (warped, ambient)
    }

    /// Decodes SDF and geometry feature at hyper-canonical points.
    pub fn geometry_tape(&self, tape: &mut Tape, warped: Var, ambient: Var, ratio: f64) -> (Var, Var) {
        let active = active_hash_levels(ratio, self.cfg.hash_levels);
        let hg = tape.hash_encode(self.hash_geo, warped, &self.hash_meta, active);
        let gin = tape.concat_cols(&[warped, hg, ambient]);
        let out = self.mlp_tape(tape, &self.sdf_layers, gin, Act::Softplus(self.cfg.softplus_beta));
        let sdf = tape.slice_cols(out, 0, 1);
        let feat = tape.slice_cols(out, 1, self.cfg.feature_dim);
        (sdf, feat)
    }

    /// Decodes color at hyper-canonical points given the geometry feature.
    pub fn color_tape(&self, tape: &mut Tape, warped: Var, feat: Var, ratio: f64) -> Var {
        let active = active_hash_levels(ratio, self.cfg.hash_levels);
        let hc = tape.hash_encode(self.hash_col, warped, &self.hash_meta, active);
        let cin = tape.concat_cols(&[hc, feat]);
        let c = self.mlp_tape(tape, &self.color_layers, cin, Act::Relu);
        tape.sigmoid(c)
    }

    /// Full observation-space forward: warp, then decode SDF and color.
    pub fn forward_obs_tape(&self, tape: &mut Tape, x: Var, t_norm: f64, ratio: f64) -> FieldOut {
        let (warped, ambient) = self.warp_tape(tape, x, t_norm, ratio);
        let (sdf, feat) = self.geometry_tape(tape, warped, ambient, ratio);
        let color = self.color_tape(tape, warped, feat, ratio);
        FieldOut { warped, ambient, sdf, feat, color }
    }

    /// Canonical-probe forward: the spatial part is `x` itself, the ambient
    /// part comes from the topology network at `(x, t)`.
    pub fn forward_canonical_tape(&self, tape: &mut Tape, x: Var, t_norm: f64, ratio: f64) -> FieldOut {
        let (m, _) = tape.shape(x);
        let code1 = self.temporal.encode_tape(tape, t_norm);
        let code = tape.broadcast_row(code1, m);
        let et = freq_encode_tape(tape, x, &self.freq_topo, ratio);
        let tin = tape.concat_cols(&[et, code]);
        let ambient = self.mlp_tape(tape, &self.topo_layers, tin, Act::Relu);
        let (sdf, feat) = self.geometry_tape(tape, x, ambient, ratio);
        let color = self.color_tape(tape, x, feat, ratio);
        FieldOut { warped: x, ambient, sdf, feat, color }
    }

    /// Spatial SDF gradient by central differences, built on tape so it is
    /// differentiable w.r.t. parameters. Points are tape constants `[m,3]`;
    /// the return is `(gradient [m,3], center SDF [m,1])`. One batched field
    /// evaluation covers the center and all six offsets.
    pub fn sdf_fd_gradient_tape(
        &self,
        tape: &mut Tape,
        points: &[f64],
        t_norm: f64,
        ratio: f64,
        eps: f64,
        map: WarpMap,
    ) -> (Var, Var) {
        let m = points.len() / 3;
        let mut all = Vec::with_capacity(7 * points.len());
        all.extend_from_slice(points);
        for axis in 0..3 {
            for sign in [1.0f64, -1.0] {
                for i in 0..m {
                    let mut p = [points[i * 3], points[i * 3 + 1], points[i * 3 + 2]];
                    p[axis] += sign * eps;
                    all.extend_from_slice(&p);
                }
            }
        }
        let xall = tape.constant(all, 7 * m, 3);
        let sdf = match map {
            WarpMap::Observation => {
                let (warped, ambient) = self.warp_tape(tape, xall, t_norm, ratio);
                self.geometry_tape(tape, warped, ambient, ratio).0
            }
            WarpMap::Canonical => {
                let out = self.forward_canonical_tape(tape, xall, t_norm, ratio);
                out.sdf
            }
        };
        let center: Vec<u32> = (0..m as u32).collect();
        let s_center = tape.gather_rows(sdf, center);
        let inv = 1.0 / (2.0 * eps);
        let mut comps = Vec::with_capacity(3);
        for axis in 0..3 {
            let plus: Vec<u32> = (0..m as u32).map(|i| (1 + 2 * axis as u32) * m as u32 + i).collect();
            let minus: Vec<u32> = (0..m as u32).map(|i| (2 + 2 * axis as u32) * m as u32 + i).collect();
            let sp = tape.gather_rows(sdf, plus);
            let sm = tape.gather_rows(sdf, minus);
            comps.push(tape.axpy(inv, sp, -inv, sm));
        }
        let grad = tape.concat_cols(&comps);
        (grad, s_center)
    }

    // ---- plain (no-gradient) forward ----------------------------------

    fn mlp_plain(&self, params: &ParamStore, layers: &[(ParamId, ParamId)], x: &[f64], act: &Act) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut in_dim = params.block(layers[0].0).cols;
        let rows = x.len() / in_dim;
        for (l, &(w, b)) in layers.iter().enumerate() {
            let wb = params.block(w);
            let bb = params.block(b);
            let out_dim = wb.rows;
            let mut out = vec![0.0; rows * out_dim];
            for i in 0..rows {
                let xi = &h[i * in_dim..(i + 1) * in_dim];
                let oi = &mut out[i * out_dim..(i + 1) * out_dim];
                // Products first, bias after — the same association the tape
                // layer uses, so both paths produce identical bits.
                for j in 0..out_dim {
                    let wj = &wb.data[j * in_dim..(j + 1) * in_dim];
                    let mut acc = 0.0;
                    for k in 0..in_dim {
                        acc += xi[k] * wj[k];
                    }
                    oi[j] = acc + bb.data[j];
                }
            }
            if l + 1 < layers.len() {
                match act {
                    Act::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
                    Act::Softplus(beta) => {
                        out.iter_mut().for_each(|v| *v = crate::autodiff::softplus_scaled(*v, *beta))
                    }
                }
            }
            h = out;
            in_dim = out_dim;
        }
        h
    }

    /// Value-only warp of `m × 3` points: returns `(warped, ambient)`.
    pub fn warp_plain(&self, params: &ParamStore, pts: &[f64], t_norm: f64, ratio: f64) -> (Vec<f64>, Vec<f64>) {
        let m = pts.len() / 3;
        let code = self.temporal.encode(params, t_norm);
        let ed = self.freq_deform.encode(pts, 3, ratio);
        let din = concat_with_code(&ed, m, &code);
        let disp = self.mlp_plain(params, &self.deform_layers, &din, &Act::Relu);
        let warped: Vec<f64> = pts.iter().zip(&disp).map(|(&x, &d)| x + d).collect();
        let et = self.freq_topo.encode(pts, 3, ratio);
        let tin = concat_with_code(&et, m, &code);
        let ambient = self.mlp_plain(params, &self.topo_layers, &tin, &Act::Relu);
        (warped, ambient)
    }

    /// Value-only SDF + feature at hyper-canonical points.
    pub fn geometry_plain(
        &self,
        params: &ParamStore,
        warped: &[f64],
        ambient: &[f64],
        ratio: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let m = warped.len() / 3;
        let active = active_hash_levels(ratio, self.cfg.hash_levels);
        let hg = hash_encode_plain(&params.block(self.hash_geo).data, &self.hash_meta, active, warped);
        let hw = self.hash_meta.output_dim();
        let ad = self.cfg.ambient_dim;
        let in_dim = 3 + hw + ad;
        let mut gin = vec![0.0; m * in_dim];
        for i in 0..m {
            gin[i * in_dim..i * in_dim + 3].copy_from_slice(&warped[i * 3..i * 3 + 3]);
            gin[i * in_dim + 3..i * in_dim + 3 + hw].copy_from_slice(&hg[i * hw..(i + 1) * hw]);
            gin[i * in_dim + 3 + hw..(i + 1) * in_dim].copy_from_slice(&ambient[i * ad..(i + 1) * ad]);
        }
        let out = self.mlp_plain(params, &self.sdf_layers, &gin, &Act::Softplus(self.cfg.softplus_beta));
        let width = 1 + self.cfg.feature_dim;
        let mut sdf = Vec::with_capacity(m);
        let mut feat = Vec::with_capacity(m * self.cfg.feature_dim);
        for i in 0..m {
            sdf.push(out[i * width]);
            feat.extend_from_slice(&out[i * width + 1..(i + 1) * width]);
        }
        (sdf, feat)
    }

    /// Value-only color at hyper-canonical points.
    pub fn color_plain(&self, params: &ParamStore, warped: &[f64], feat: &[f64], ratio: f64) -> Vec<f64> {
        let m = warped.len() / 3;
        let active = active_hash_levels(ratio, self.cfg.hash_levels);
        let hc = hash_encode_plain(&params.block(self.hash_col).data, &self.hash_meta, active, warped);
        let hw = self.hash_meta.output_dim();
        let fd = self.cfg.feature_dim;
        let in_dim = hw + fd;
        let mut cin = vec![0.0; m * in_dim];
        for i in 0..m {
            cin[i * in_dim..i * in_dim + hw].copy_from_slice(&hc[i * hw..(i + 1) * hw]);
            cin[i * in_dim + hw..(i + 1) * in_dim].copy_from_slice(&feat[i * fd..(i + 1) * fd]);
        }
        let mut c = self.mlp_plain(params, &self.color_layers, &cin, &Act::Relu);
        c.iter_mut().for_each(|v| *v = crate::autodiff::sigmoid(*v));
        c
    }

    /// Value-only observation-space SDF (warp + decode), the workhorse of
    /// occupancy refreshes and mesh extraction.
    pub fn sdf_obs_plain(&self, params: &ParamStore, pts: &[f64], t_norm: f64, ratio: f64) -> Vec<f64> {
        let (warped, ambient) = self.warp_plain(params, pts, t_norm, ratio);
        self.geometry_plain(params, &warped, &ambient, ratio).0
    }

    /// Value-only canonical-probe SDF: the spatial part is the point itself,
    /// the ambient part comes from the topology network at `(x, t)`.
    pub fn sdf_cano_plain(&self, params: &ParamStore, pts: &[f64], t_norm: f64, ratio: f64) -> Vec<f64> {
        let m = pts.len() / 3;
        let code = self.temporal.encode(params, t_norm);
        let et = self.freq_topo.encode(pts, 3, ratio);
        let tin = concat_with_code(&et, m, &code);
        let ambient = self.mlp_plain(params, &self.topo_layers, &tin, &Act::Relu);
        self.geometry_plain(params, pts, &ambient, ratio).0
    }

    /// Value-only observation-space color (for mesh vertex colors).
    pub fn color_obs_plain(&self, params: &ParamStore, pts: &[f64], t_norm: f64, ratio: f64) -> Vec<f64> {
        let (warped, ambient) = self.warp_plain(params, pts, t_norm, ratio);
        let (_, feat) = self.geometry_plain(params, &warped, &ambient, ratio);
        self.color_plain(params, &warped, &feat, ratio)
    }

    /// Current density sharpness `β = exp(ρ)`.
    pub fn beta(&self, params: &ParamStore) -> f64 {
        params.block(self.rho).data[0].exp()
    }
}

/// Outputs of a field forward pass (all tape vars).
pub struct FieldOut {
    pub warped: Var,
    pub ambient: Var,
    pub sdf: Var,
    pub feat: Var,
    pub color: Var,
}

fn concat_with_code(enc: &[f64], rows: usize, code: &[f64]) -> Vec<f64> {
    if rows == 0 {
        return Vec::new();
    }
    let ew = enc.len() / rows;
    let width = ew + code.len();
    let mut out = vec![0.0; rows * width];
    for i in 0..rows {
        out[i * width..i * width + ew].copy_from_slice(&enc[i * ew..(i + 1) * ew]);
        out[i * width + ew..(i + 1) * width].copy_from_slice(code);
    }
    out
}
