//! Input encodings and their coarse-to-fine schedules.
//!
//! Three encodings feed the networks:
//! - **Frequency encoding** of spatial coordinates for the deformation and
//!   topology networks, with a cosine window that eases high frequencies in
//!   as training progresses.
//! - **Temporal grid**: a small multi-resolution 1-D feature grid over frame
//!   time, linearly interpolated; concatenated levels form the time code.
//! - **Hash grid** (in [`crate::autodiff::Tape::hash_encode`]): the canonical
//!   field's spatial features, masked coarse-to-fine by whole levels.
//!
//! The shared progress knob is a bandwidth ratio in (0,1] derived from the
//! training epoch; see [`bandwidth_ratio`].

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Fraction of each encoding's bandwidth unlocked at epoch `e`:
/// starts at 0.25 and reaches 1 at `3/4 · e_max`, then saturates.
pub fn bandwidth_ratio(epoch: usize, e_max: usize) -> f64 {
    (0.25 + epoch as f64 / e_max as f64).min(1.0)
}

/// Number of active hash-grid levels for a bandwidth ratio: at least one,
/// growing linearly with the ratio to all `levels`.
pub fn active_hash_levels(ratio: f64, levels: usize) -> usize {
    ((ratio * levels as f64).ceil() as usize).clamp(1, levels)
}

/// Axis-aligned sinusoidal encoding with a smooth coarse-to-fine window.
///
/// Band `b` contributes `w_b · [sin(2^b π x), cos(2^b π x)]` per coordinate,
/// with the identity passthrough always on. The window
/// `w_b = (1 - cos(π · clamp(α - b, 0, 1))) / 2` (where `α = ratio · bands`)
/// eases each band in over one unit of `α` so the encoded signal stays
/// continuous in the schedule.
#[derive(Debug, Clone)]
pub struct FreqEncoding {
    pub bands: usize,
}

impl FreqEncoding {
    pub fn new(bands: usize) -> Self {
        Self { bands }
    }

    /// Output width for `dim` input coordinates (identity + sin/cos bands).
    pub fn output_dim(&self, dim: usize) -> usize {
        dim * (1 + 2 * self.bands)
    }

    pub fn window(&self, ratio: f64, band: usize) -> f64 {
        let alpha = ratio * self.bands as f64;
        let t = (alpha - band as f64).clamp(0.0, 1.0);
        0.5 * (1.0 - (std::f64::consts::PI * t).cos())
    }

    /// Encodes rows of `x` (any column count) into
    /// `[x, w_0 sin(πx), w_0 cos(πx), w_1 sin(2πx), ...]`.
    pub fn encode(&self, x: &[f64], dim: usize, ratio: f64) -> Vec<f64> {
        let rows = x.len() / dim;
        let width = self.output_dim(dim);
        let mut out = vec![0.0; rows * width];
        for i in 0..rows {
            let xi = &x[i * dim..(i + 1) * dim];
            let o = &mut out[i * width..(i + 1) * width];
            o[..dim].copy_from_slice(xi);
            let mut off = dim;
            for b in 0..self.bands {
                let w = self.window(ratio, b);
                let freq = (1u64 << b) as f64 * std::f64::consts::PI;
                for &v in xi {
                    let a = freq * v;
                    o[off] = w * a.sin();
                    o[off + 1] = w * a.cos();
                    off += 2;
                }
            }
        }
        out
    }

}

/// On-tape frequency encoding, differentiable w.r.t. `x`. Matches
/// [`FreqEncoding::encode`] exactly; used where the encoded positions carry
/// gradients.
pub fn freq_encode_tape(tape: &mut Tape, x: Var, enc: &FreqEncoding, ratio: f64) -> Var {
    let (_, dim) = tape.shape(x);
    let mut parts: Vec<Var> = vec![x];
    for b in 0..enc.bands {
        let w = enc.window(ratio, b);
        let freq = (1u64 << b) as f64 * std::f64::consts::PI;
        let scaled = tape.scale(x, freq);
        let s = tape.sin(scaled);
        let c = tape.cos(scaled);
        let ws = tape.scale(s, w);
        let wc = tape.scale(c, w);
        // Interleave per-coordinate to match `encode`'s layout:
        // [x | band 0: s(c0) c(c0) s(c1) c(c1) ... | band 1: ...]
        for coord in 0..dim {
            let sc = tape.slice_cols(ws, coord, 1);
            let cc = tape.slice_cols(wc, coord, 1);
            parts.push(sc);
            parts.push(cc);
        }
    }
    tape.concat_cols(&parts)
}

/// Multi-resolution temporal feature grid over normalized frame time.
///
/// Level `l` has `nodes[l]` nodes uniformly spanning `t ∈ [0,1]`; a lookup
/// linearly interpolates the two bracketing nodes. The per-frame time code is
/// the concatenation over levels (`levels · feat` wide). With `n` frames the
/// default ladder is `[max(2, ⌈n/8⌉), max(2, ⌈n/4⌉), n]`.
#[derive(Debug, Clone)]
pub struct TemporalGrid {
    pub nodes: Vec<usize>,
    pub feat: usize,
    /// Parameter block per level.
    pub blocks: Vec<ParamId>,
}

impl TemporalGrid {
    pub fn default_ladder(frames: usize) -> Vec<usize> {
        let n = frames.max(2);
        vec![(n.div_ceil(8)).max(2), (n.div_ceil(4)).max(2), n]
    }

    /// Registers parameter blocks (`nodes[l] × feat` each), initialized from
    /// `N(0, init_sd²)`.
    pub fn register(
        params: &mut ParamStore,
        prefix: &str,
        nodes: Vec<usize>,
        feat: usize,
        init_sd: f64,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, init_sd).expect("valid sd");
        let blocks = nodes
            .iter()
            .enumerate()
            .map(|(l, &n)| {
                let data: Vec<f64> = (0..n * feat).map(|_| normal.sample(rng)).collect();
                params.register(format!("{prefix}.level{l}"), n, feat, data)
            })
            .collect();
        Self { nodes, feat, blocks }
    }

    pub fn output_dim(&self) -> usize {
        self.nodes.len() * self.feat
    }

    /// Interpolation pair `(lo, hi, w)` for one level at normalized time.
    pub fn lookup(&self, level: usize, t_norm: f64) -> (u32, u32, f64) {
        let n = self.nodes[level];
        let x = t_norm.clamp(0.0, 1.0) * (n - 1) as f64;
        let lo = (x.floor() as usize).min(n - 2);
        let w = x - lo as f64;
        (lo as u32, (lo + 1) as u32, w)
    }

    /// Emits the full time code for one time as a `[1, levels·feat]` buffer.
    pub fn encode_tape(&self, tape: &mut Tape, t_norm: f64) -> Var {
        let parts: Vec<Var> = (0..self.nodes.len())
            .map(|l| {
                let pair = self.lookup(l, t_norm);
                tape.gather_interp(self.blocks[l], vec![pair])
            })
            .collect();
        tape.concat_cols(&parts)
    }

    /// Plain (non-tape) evaluation of the time code.
    pub fn encode(&self, params: &ParamStore, t_norm: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_dim());
        for l in 0..self.nodes.len() {
            let (lo, hi, w) = self.lookup(l, t_norm);
            let b = params.block(self.blocks[l]);
            for f in 0..self.feat {
                out.push((1.0 - w) * b.data[lo as usize * self.feat + f] + w * b.data[hi as usize * self.feat + f]);
            }
        }
        out
    }

    /// Node triples `(k-1, k, k+1)` used by the temporal smoothness term for
    /// nodes within `window` of normalized time `t_norm`, per level.
    pub fn smoothness_triples(&self, t_norm: f64, window: f64) -> Vec<(usize, Vec<(u32, u32, u32)>)> {
        let mut out = Vec::new();
        for (l, &n) in self.nodes.iter().enumerate() {
            if n < 3 {
                continue;
            }
            let mut triples = Vec::new();
            for k in 1..n - 1 {
                let tk = k as f64 / (n - 1) as f64;
                if (tk - t_norm).abs() <= window {
                    triples.push(((k - 1) as u32, k as u32, (k + 1) as u32));
                }
            }
            if !triples.is_empty() {
                out.push((l, triples));
            }
        }
        out
    }
}

/// Uniform sample in `[-1,1]³` (three RNG draws, in x,y,z order).
pub fn sample_unit_cube(rng: &mut ChaCha20Rng) -> [f64; 3] {
    let x = rng.gen_range(-1.0..=1.0);
    let y = rng.gen_range(-1.0..=1.0);
    let z = rng.gen_range(-1.0..=1.0);
    [x, y, z]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_check_blocks, GradStore};
    use rand::SeedableRng;

    #[test]
    fn bandwidth_ratio_anchors() {
        let e_max = 2000;
        assert!((bandwidth_ratio(0, e_max) - 0.25).abs() < 1e-12);
        assert!((bandwidth_ratio(e_max, e_max) - 1.0).abs() < 1e-12);
        assert!((bandwidth_ratio(e_max / 2, e_max) - 0.75).abs() < 1e-12);
        // Saturates at 1 from 3/4·e_max on.
        assert!((bandwidth_ratio(3 * e_max / 4, e_max) - 1.0).abs() < 1e-12);
        assert!((bandwidth_ratio(e_max * 2, e_max) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn freq_window_eases_bands_in_order() {
        let enc = FreqEncoding::new(6);
        // At ratio 0.25 with 6 bands, α = 1.5: band 0 fully open, band 1
        // half-open, bands ≥ 2 closed.
        assert!((enc.window(0.25, 0) - 1.0).abs() < 1e-12);
        assert!((enc.window(0.25, 1) - 0.5).abs() < 1e-12);
        for b in 2..6 {
            assert_eq!(enc.window(0.25, b), 0.0);
        }
        // Fully open everywhere at ratio 1.
        for b in 0..6 {
            assert!((enc.window(1.0, b) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn freq_encode_dims_and_identity_prefix() {
        let enc = FreqEncoding::new(6);
        assert_eq!(enc.output_dim(3), 39);
        let enc4 = FreqEncoding::new(4);
        assert_eq!(enc4.output_dim(3), 27);
        let x = vec![0.3, -0.2, 0.9];
        let e = enc.encode(&x, 3, 1.0);
        assert_eq!(&e[..3], &x[..]);
        // Band 0 of coordinate 0: sin(πx), cos(πx).
        assert!((e[3] - (std::f64::consts::PI * 0.3).sin()).abs() < 1e-12);
        assert!((e[4] - (std::f64::consts::PI * 0.3).cos()).abs() < 1e-12);
    }

    #[test]
    fn freq_encode_tape_matches_plain_and_differentiates() {
        let enc = FreqEncoding::new(3);
        let params = ParamStore::new();
        let x = vec![0.25, -0.7, 0.4, 0.1, 0.9, -0.3];
        let mut tape = Tape::new(&params);
        let xv = tape.leaf(x.clone(), 2, 3);
        let e = freq_encode_tape(&mut tape, xv, &enc, 0.6);
        let plain = enc.encode(&x, 3, 0.6);
        let taped = tape.value(e).to_vec();
        assert_eq!(taped.len(), plain.len());
        for (a, b) in taped.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
        // FD on the summed square of the encoding w.r.t. the input leaf.
        let w: Vec<f64> = (0..taped.len()).map(|i| 0.1 + 0.01 * i as f64).collect();
        let t = vec![0.0; taped.len()];
        let loss = tape.weighted_sum_sq(e, w.clone(), t.clone());
        let mut grads = GradStore::zeros_like(&params);
        let leafg = tape.backward(loss, &mut grads);
        let ad = leafg.get(xv).unwrap().to_vec();
        let eval = |vals: &[f64]| {
            let mut t2 = Tape::new(&params);
            let xv = t2.constant(vals.to_vec(), 2, 3);
            let e = freq_encode_tape(&mut t2, xv, &enc, 0.6);
            let l = t2.weighted_sum_sq(e, w.clone(), t.clone());
            t2.scalar(l)
        };
        for i in 0..x.len() {
            let h = 1e-6;
            let mut hi = x.clone();
            hi[i] += h;
            let mut lo = x.clone();
            lo[i] -= h;
            let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
            assert!(
                crate::autodiff::rel_err(ad[i], fd, 1e-8) < 1e-5,
                "coord {i}: ad={} fd={fd}",
                ad[i]
            );
        }
    }

    #[test]
    fn temporal_ladder_matches_frame_count() {
        assert_eq!(TemporalGrid::default_ladder(40), vec![5, 10, 40]);
        assert_eq!(TemporalGrid::default_ladder(8), vec![2, 2, 8]);
        assert_eq!(TemporalGrid::default_ladder(1), vec![2, 2, 2]);
    }

    #[test]
    fn temporal_lookup_interpolates_endpoints_and_midpoints() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut params = ParamStore::new();
        let grid = TemporalGrid::register(&mut params, "t", vec![5], 2, 1.0, &mut rng);
        let b = params.block(grid.blocks[0]);
        let node = |k: usize, f: usize| b.data[k * 2 + f];
        // t=0 hits node 0; t=1 hits node 4; t=0.125 is halfway 0→1.
        let c0 = grid.encode(&params, 0.0);
        assert!((c0[0] - node(0, 0)).abs() < 1e-12);
        let c1 = grid.encode(&params, 1.0);
        assert!((c1[1] - node(4, 1)).abs() < 1e-12);
        let ch = grid.encode(&params, 0.125);
        assert!((ch[0] - 0.5 * (node(0, 0) + node(1, 0))).abs() < 1e-12);
    }

    #[test]
    fn temporal_grid_gradients_check_out() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut params = ParamStore::new();
        let grid = TemporalGrid::register(&mut params, "t", vec![3, 7], 4, 0.5, &mut rng);
        let ids = grid.blocks.clone();
        let mut grads = GradStore::zeros_like(&params);
        let t_norm = 0.37;
        {
            let mut tape = Tape::new(&params);
            let code = grid.encode_tape(&mut tape, t_norm);
            let (r, c) = tape.shape(code);
            let w = vec![1.0; r * c];
            let tgt = vec![0.25; r * c];
            let loss = tape.weighted_sum_sq(code, w, tgt);
            tape.backward(loss, &mut grads);
        }
        let grid2 = grid.clone();
        let worst = fd_check_blocks(&mut params, &grads, &ids, 1e-6, 1e-9, |p| {
            let mut tape = Tape::new(p);
            let code = grid2.encode_tape(&mut tape, t_norm);
            let (r, c) = tape.shape(code);
            let loss = tape.weighted_sum_sq(code, vec![1.0; r * c], vec![0.25; r * c]);
            tape.scalar(loss)
        });
        assert!(worst < 1e-6, "worst {worst:.3e}");
    }

    #[test]
    fn hash_level_mask_grows_with_ratio() {
        assert_eq!(active_hash_levels(0.25, 16), 4);
        assert_eq!(active_hash_levels(1.0, 16), 16);
        assert_eq!(active_hash_levels(0.0, 16), 1);
        assert_eq!(active_hash_levels(0.26, 16), 5);
    }
}
