//! Reverse-mode differentiation over small dense buffers.
//!
//! The training pipeline is a static chain of batched operations (encodings →
//! MLPs → density → compositing → losses), so instead of a per-scalar graph
//! the tape records whole-buffer operations with hand-derived backward rules.
//! Buffers are row-major `rows × cols` matrices of `f64`; a row is one sample
//! point or one ray.
//!
//! Trainable parameters live outside the tape in a [`ParamStore`]; operations
//! reference them by [`ParamId`] and `backward` scatters their gradients into
//! a [`GradStore`]. Everything runs single-threaded in a fixed order, so
//! gradient accumulation is bit-reproducible.
//!
//! Every backward rule here is exercised against central finite differences;
//! see the module tests and the loss-level gradient suite.

use crate::error::{Error, Result};

/// Exponent clamp for opacity terms: keeps `1 - α = exp(-σδ)` comfortably
/// above zero so the compositing backward (which divides by it) stays finite.
pub const MAX_OPTICAL_DEPTH: f64 = 80.0;

/// Handle to one named parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// One named block of trainable parameters (`rows × cols`, row-major).
#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub name: String,
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

/// All trainable parameters of a model, in registration order.
///
/// Registration order is part of the determinism contract: optimizers,
/// checkpoints, and gradient accumulation all walk blocks in this order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "parameter block size mismatch");
        self.blocks.push(ParamBlock { name: name.into(), data, rows, cols });
        ParamId(self.blocks.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn block_mut(&mut self, id: ParamId) -> &mut ParamBlock {
        &mut self.blocks[id.0]
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn iter_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len()).map(ParamId)
    }

    /// Looks a block up by name (used by checkpoint loading).
    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }
}

/// Per-block gradient accumulators matching a [`ParamStore`] layout.
#[derive(Debug, Clone)]
pub struct GradStore {
    blocks: Vec<Vec<f64>>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self { blocks: params.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect() }
    }

    pub fn clear(&mut self) {
        for b in &mut self.blocks {
            b.fill(0.0);
        }
    }

    pub fn block(&self, id: ParamId) -> &[f64] {
        &self.blocks[id.0]
    }

    pub fn block_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.blocks[id.0]
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }
}

/// Handle to a buffer on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
struct Buf {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

/// Static description of one multiresolution hash grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HashGridMeta {
    pub levels: usize,
    /// Features per level.
    pub feat: usize,
    /// Power-of-two table length (entries per level).
    pub table_size: usize,
    /// Per-level lattice resolutions (cells per axis; the vertex lattice has
    /// `res + 1` points per axis).
    pub resolutions: Vec<u32>,
}

impl HashGridMeta {
    /// Geometric resolution ladder from `base_res` to `max_res`.
    pub fn new(levels: usize, feat: usize, log2_table: u32, base_res: u32, max_res: u32) -> Self {
        assert!(levels >= 1);
        let growth = if levels > 1 {
            ((max_res as f64).ln() - (base_res as f64).ln()) / (levels as f64 - 1.0)
        } else {
            0.0
        };
        let resolutions = (0..levels)
            .map(|l| ((base_res as f64) * (growth * l as f64).exp()).floor() as u32)
            .collect();
        Self { levels, feat, table_size: 1usize << log2_table, resolutions }
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.feat
    }
}

/// Spatial hash for a lattice vertex, XOR of coordinate-prime products.
#[inline]
pub fn hash_vertex(x: u32, y: u32, z: u32, table_size: usize) -> usize {
    const P1: u64 = 2_654_435_761;
    const P2: u64 = 805_459_861;
    let h = (x as u64) ^ (y as u64).wrapping_mul(P1) ^ (z as u64).wrapping_mul(P2);
    (h as usize) & (table_size - 1)
}

/// One trilinear lookup cell: hashed corner entries plus the fractional
/// coordinate and its scale factor d(frac)/d(position) (zero on clamped axes).
#[derive(Debug, Clone)]
pub struct HashCell {
    pub corners: [u32; 8],
    pub frac: [f64; 3],
    pub dscale: [f64; 3],
}

/// Locates the lattice cell containing `p` (coordinates in [-1,1]) at
/// resolution `res` and hashes its 8 corners. Positions outside the domain
/// clamp to the boundary (flagged by a zero `dscale` on that axis).
pub fn hash_cell(p: [f64; 3], res: u32, table_size: usize) -> HashCell {
    let mut base = [0u32; 3];
    let mut frac = [0.0f64; 3];
    let mut dscale = [0.0f64; 3];
    for a in 0..3 {
        // [-1,1] → lattice coordinate in [0, res].
        let scaled = (p[a] + 1.0) * 0.5 * res as f64;
        let clamped = scaled.clamp(0.0, res as f64);
        let mut c0 = clamped.floor() as u32;
        if c0 >= res {
            c0 = res - 1;
        }
        base[a] = c0;
        frac[a] = clamped - c0 as f64;
        dscale[a] = if scaled == clamped { 0.5 * res as f64 } else { 0.0 };
    }
    let mut corners = [0u32; 8];
    for (ci, corner) in corners.iter_mut().enumerate() {
        let cx = base[0] + (ci & 1) as u32;
        let cy = base[1] + ((ci >> 1) & 1) as u32;
        let cz = base[2] + ((ci >> 2) & 1) as u32;
        *corner = hash_vertex(cx, cy, cz, table_size) as u32;
    }
    HashCell { corners, frac, dscale }
}

/// Trilinear corner weight for corner index `ci` (bit 0 = x, 1 = y, 2 = z).
#[inline]
fn corner_weight(frac: &[f64; 3], ci: usize) -> f64 {
    let wx = if ci & 1 == 0 { 1.0 - frac[0] } else { frac[0] };
    let wy = if (ci >> 1) & 1 == 0 { 1.0 - frac[1] } else { frac[1] };
    let wz = if (ci >> 2) & 1 == 0 { 1.0 - frac[2] } else { frac[2] };
    wx * wy * wz
}

/// Value-only multi-level hash encoding (same math as
/// [`Tape::hash_encode`], without gradient bookkeeping). `pos` is `m × 3`
/// row-major; the output is `m × levels·feat` with inactive levels zeroed.
pub fn hash_encode_plain(
    grid: &[f64],
    meta: &HashGridMeta,
    active_levels: usize,
    pos: &[f64],
) -> Vec<f64> {
    let m = pos.len() / 3;
    let feat = meta.feat;
    let width = meta.output_dim();
    let active = active_levels.min(meta.levels);
    let mut out = vec![0.0; m * width];
    for i in 0..m {
        let p = [pos[i * 3], pos[i * 3 + 1], pos[i * 3 + 2]];
        for l in 0..active {
            let cell = hash_cell(p, meta.resolutions[l], meta.table_size);
            let table_off = l * meta.table_size * feat;
            for ci in 0..8 {
                let w = corner_weight(&cell.frac, ci);
                let e = table_off + cell.corners[ci] as usize * feat;
                for f in 0..feat {
                    out[i * width + l * feat + f] += w * grid[e + f];
                }
            }
        }
    }
    out
}

enum Op {
    /// Constant or differentiable input. Gradients for `grad: true` leaves are
    /// retained and readable after backward.
    Leaf { grad: bool },
    /// Copy of a parameter block as a buffer.
    ParamLeaf { p: ParamId },
    /// `y = x · Wᵀ (+ b)` with `W: [n, k]`, `x: [m, k]`.
    Linear { x: Var, w: ParamId, b: Option<ParamId> },
    /// `out = a·x + b·y`, elementwise on same-shape buffers.
    Axpy { a: f64, x: Var, b: f64, y: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var },
    MulElem { x: Var, y: Var },
    Relu { x: Var },
    /// `softplus(βx)/β`; β→∞ approaches relu while staying smooth.
    SoftplusBeta { x: Var, beta: f64 },
    Sigmoid { x: Var },
    Exp { x: Var },
    Sin { x: Var },
    Cos { x: Var },
    Square { x: Var },
    Sqrt { x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    /// Rows normalized to unit length; rows shorter than `eps` map to zero
    /// (and receive zero gradient).
    NormalizeRows3 { x: Var, eps: f64 },
    /// Per-row dot product with constant rows `dirs` (`[m,3] → [m,1]`).
    RowDotRows { x: Var, dirs: Vec<f64> },
    /// Column-wise concatenation of same-row-count buffers.
    Concat { xs: Vec<Var> },
    SliceCols { x: Var, start: usize, len: usize },
    GatherRows { x: Var, idx: Vec<u32> },
    /// Row replicated `rows` times (`[1,n] → [rows,n]`).
    BroadcastRow { x: Var, rows: usize },
    /// Mean of input rows per group id (`groups[i] < n_groups`).
    GroupMeanRows { x: Var, groups: Vec<u32>, counts: Vec<u32> },
    SumAll { x: Var },
    /// `Σ_i w_i (x_i - t_i)²` over all elements, as a scalar.
    WeightedSumSq { x: Var, w: Vec<f64>, t: Vec<f64> },
    /// Binary cross entropy against `target`, clamped to `[c, 1-c]`, summed.
    Bce { x: Var, target: Vec<f64>, clamp: f64 },
    /// Laplace-CDF density: `σ = (1/β)·Ψ_β(-s)` with `β = exp(ρ)`.
    Density { s: Var, rho: ParamId, beta_floor: f64 },
    /// Front-to-back volume compositing over packed rays.
    /// Input: per-sample `sigma [m,1]`, `color [m,3]`; constants `deltas` and
    /// `dists` per sample; `starts` (len R+1) delimits rays. Output `[R,5]`
    /// rows `(C_r, C_g, C_b, D, M)`.
    Composite { sigma: Var, color: Var, deltas: Vec<f64>, dists: Vec<f64>, starts: Vec<u32> },
    /// `out = c + (1 - m)·bg` with per-row mass `m [R,1]`, colors `[R,3]`.
    BgComposite { c: Var, m: Var, bg: [f64; 3] },
    /// Trilinear multi-level hash encoding of positions `[m,3]` (in [-1,1]³).
    /// Levels `>= active_levels` output zeros and take no gradient.
    HashEncode { grid: ParamId, pos: Var, meta: HashGridMeta, active_levels: usize, cells: Vec<HashCell> },
    /// Linear interpolation rows from a `[nodes, feat]` grid: per output row a
    /// pair of node indices and the upper weight.
    GatherInterp { grid: ParamId, pairs: Vec<(u32, u32, f64)> },
    /// Identity with severed gradient.
    Detach,
}

/// Recorded forward computation. Create one per training step (or chunk),
/// build the loss, then call [`Tape::backward`].
pub struct Tape<'p> {
    params: &'p ParamStore,
    bufs: Vec<Buf>,
    ops: Vec<Op>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, bufs: Vec::new(), ops: Vec::new() }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    fn push(&mut self, op: Op, data: Vec<f64>, rows: usize, cols: usize) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.bufs.push(Buf { data, rows, cols });
        self.ops.push(op);
        Var(self.bufs.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.bufs[v.0].data
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.bufs[v.0].rows, self.bufs[v.0].cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.bufs[v.0].data.len(), 1);
        self.bufs[v.0].data[0]
    }

    // ---- leaves ----------------------------------------------------------

    /// Constant input buffer.
    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.push(Op::Leaf { grad: false }, data, rows, cols)
    }

    /// Differentiable input buffer; its gradient is readable after backward.
    pub fn leaf(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.push(Op::Leaf { grad: true }, data, rows, cols)
    }

    /// Parameter block as a buffer (copies the values).
    pub fn param(&mut self, p: ParamId) -> Var {
        let b = self.params.block(p);
        self.push(Op::ParamLeaf { p }, b.data.clone(), b.rows, b.cols)
    }

    // ---- dense ops -------------------------------------------------------

    /// `y[m,n] = x[m,k] · W[n,k]ᵀ + b`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let (m, k) = self.shape(x);
        let wb = self.params.block(w);
        assert_eq!(wb.cols, k, "linear: weight cols {} vs input cols {k}", wb.cols);
        let n = wb.rows;
        if let Some(bid) = b {
            debug_assert_eq!(self.params.block(bid).data.len(), n);
        }
        let mut out = vec![0.0; m * n];
        let xd = &self.bufs[x.0].data;
        let wd = &wb.data;
        for i in 0..m {
            let xi = &xd[i * k..(i + 1) * k];
            let oi = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                let wj = &wd[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for l in 0..k {
                    acc += xi[l] * wj[l];
                }
                oi[j] = acc;
            }
            if let Some(bid) = b {
                let bd = &self.params.block(bid).data;
                for j in 0..n {
                    oi[j] += bd[j];
                }
            }
        }
        self.push(Op::Linear { x, w, b }, out, m, n)
    }

    pub fn axpy(&mut self, a: f64, x: Var, b: f64, y: Var) -> Var {
        assert_eq!(self.shape(x), self.shape(y), "axpy shape mismatch");
        let (rows, cols) = self.shape(x);
        let out = self.bufs[x.0]
            .data
            .iter()
            .zip(&self.bufs[y.0].data)
            .map(|(&xv, &yv)| a * xv + b * yv)
            .collect();
        self.push(Op::Axpy { a, x, b, y }, out, rows, cols)
    }

    pub fn add(&mut self, x: Var, y: Var) -> Var {
        self.axpy(1.0, x, 1.0, y)
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Var {
        self.axpy(1.0, x, -1.0, y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (rows, cols) = self.shape(x);
        let out = self.bufs[x.0].data.iter().map(|&v| c * v).collect();
        self.push(Op::Scale { x, c }, out, rows, cols)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let (rows, cols) = self.shape(x);
        let out = self.bufs[x.0].data.iter().map(|&v| v + c).collect();
        self.push(Op::AddConst { x }, out, rows, cols)
    }

    pub fn mul_elem(&mut self, x: Var, y: Var) -> Var {
        assert_eq!(self.shape(x), self.shape(y), "mul_elem shape mismatch");
        let (rows, cols) = self.shape(x);
        let out = self.bufs[x.0]
            .data
            .iter()
            .zip(&self.bufs[y.0].data)
            .map(|(&a, &b)| a * b)
            .collect();
        self.push(Op::MulElem { x, y }, out, rows, cols)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let out = self.bufs[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        self.push(Op::Relu { x }, out, rows, cols)
    }

    pub fn softplus_beta(&mut self, x: Var, beta: f64) -> Var {
        let (rows, cols) = self.shape(x);
        let out = self.bufs[x.0].data.iter().map(|&v| softplus_scaled(v, beta)).collect();
        self.push(Op::SoftplusBeta { x, beta }, out, rows, cols)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let out = self.bufs[x.0].data.iter().map(|&v| sigmoid(v)).collect();
        self.push(Op::Sigmoid { x }, out, rows, cols)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let out = self.bufs[x.0].data.iter().map(|&v| v.exp()).collect();
        self.push(Op::Exp { x }, out, rows, cols)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let out = self.bufs[x.0].data.iter().map(|&v| v.sin()).collect();
        self.push(Op::Sin { x }, out, rows, cols)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let out = self.bufs[x.0].data.iter().map(|&v| v.cos()).collect();
        self.push(Op::Cos { x }, out, rows, cols)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let out = self.bufs[x.0].data.iter().map(|&v| v * v).collect();
        self.push(Op::Square { x }, out, rows, cols)
    }

    /// Element-wise `√max(x, 0)`. The gradient is `1/(2√x)` for positive
    /// inputs and 0 at (or below) zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let out = self.bufs[x.0].data.iter().map(|&v| v.max(0.0).sqrt()).collect();
        self.push(Op::Sqrt { x }, out, rows, cols)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (rows, cols) = self.shape(x);
        let out = self.bufs[x.0].data.iter().map(|&v| v.clamp(lo, hi)).collect();
        self.push(Op::Clamp { x, lo, hi }, out, rows, cols)
    }

    pub fn normalize_rows3(&mut self, x: Var, eps: f64) -> Var {
        let (rows, cols) = self.shape(x);
        assert_eq!(cols, 3, "normalize_rows3 expects [m,3]");
        let xd = &self.bufs[x.0].data;
        let mut out = vec![0.0; rows * 3];
        for i in 0..rows {
            let r = &xd[i * 3..i * 3 + 3];
            let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            if n >= eps {
                out[i * 3] = r[0] / n;
                out[i * 3 + 1] = r[1] / n;
                out[i * 3 + 2] = r[2] / n;
            }
        }
        self.push(Op::NormalizeRows3 { x, eps }, out, rows, 3)
    }

    pub fn row_dot_rows(&mut self, x: Var, dirs: Vec<f64>) -> Var {
        let (rows, cols) = self.shape(x);
        assert_eq!(cols, 3);
        assert_eq!(dirs.len(), rows * 3);
        let xd = &self.bufs[x.0].data;
        let out = (0..rows)
            .map(|i| {
                xd[i * 3] * dirs[i * 3] + xd[i * 3 + 1] * dirs[i * 3 + 1] + xd[i * 3 + 2] * dirs[i * 3 + 2]
            })
            .collect();
        self.push(Op::RowDotRows { x, dirs }, out, rows, 1)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let rows = self.shape(xs[0]).0;
        let total: usize = xs.iter().map(|&v| self.shape(v).1).collect::<Vec<_>>().iter().sum();
        for &v in xs {
            assert_eq!(self.shape(v).0, rows, "concat_cols row mismatch");
        }
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &v in xs {
            let (_, c) = self.shape(v);
            let d = &self.bufs[v.0].data;
            for i in 0..rows {
                out[i * total + off..i * total + off + c].copy_from_slice(&d[i * c..(i + 1) * c]);
            }
            off += c;
        }
        self.push(Op::Concat { xs: xs.to_vec() }, out, rows, total)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.shape(x);
        assert!(start + len <= cols);
        let xd = &self.bufs[x.0].data;
        let mut out = vec![0.0; rows * len];
        for i in 0..rows {
            out[i * len..(i + 1) * len].copy_from_slice(&xd[i * cols + start..i * cols + start + len]);
        }
        self.push(Op::SliceCols { x, start, len }, out, rows, len)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<u32>) -> Var {
        let (rows, cols) = self.shape(x);
        let xd = &self.bufs[x.0].data;
        let mut out = vec![0.0; idx.len() * cols];
        for (o, &i) in idx.iter().enumerate() {
            assert!((i as usize) < rows, "gather_rows index out of range");
            out[o * cols..(o + 1) * cols].copy_from_slice(&xd[i as usize * cols..(i as usize + 1) * cols]);
        }
        let n = idx.len();
        self.push(Op::GatherRows { x, idx }, out, n, cols)
    }

    pub fn broadcast_row(&mut self, x: Var, rows: usize) -> Var {
        let (r, cols) = self.shape(x);
        assert_eq!(r, 1, "broadcast_row expects a single row");
        let xd = self.bufs[x.0].data.clone();
        let mut out = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            out.extend_from_slice(&xd);
        }
        self.push(Op::BroadcastRow { x, rows }, out, rows, cols)
    }

    /// Per-group mean of rows. `groups[i]` assigns input row `i` to an output
    /// row; every group must be non-empty.
    pub fn group_mean_rows(&mut self, x: Var, groups: Vec<u32>, n_groups: usize) -> Var {
        let (rows, cols) = self.shape(x);
        assert_eq!(groups.len(), rows);
        let mut counts = vec![0u32; n_groups];
        for &g in &groups {
            counts[g as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "group_mean_rows: empty group");
        let xd = &self.bufs[x.0].data;
        let mut out = vec![0.0; n_groups * cols];
        for (i, &g) in groups.iter().enumerate() {
            let inv = 1.0 / counts[g as usize] as f64;
            for c in 0..cols {
                out[g as usize * cols + c] += xd[i * cols + c] * inv;
            }
        }
        self.push(Op::GroupMeanRows { x, groups, counts }, out, n_groups, cols)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.bufs[x.0].data.iter().sum();
        self.push(Op::SumAll { x }, vec![s], 1, 1)
    }

    /// `Σ w_i (x_i - t_i)²` as a scalar. `w` and `t` are constants.
    pub fn weighted_sum_sq(&mut self, x: Var, w: Vec<f64>, t: Vec<f64>) -> Var {
        let n = self.bufs[x.0].data.len();
        assert_eq!(w.len(), n);
        assert_eq!(t.len(), n);
        let xd = &self.bufs[x.0].data;
        let mut s = 0.0;
        for i in 0..n {
            let d = xd[i] - t[i];
            s += w[i] * d * d;
        }
        self.push(Op::WeightedSumSq { x, w, t }, vec![s], 1, 1)
    }

    /// Summed binary cross entropy of predictions `x` (any shape) against 0/1
    /// targets, with predictions clamped to `[clamp, 1-clamp]`.
    pub fn bce_sum(&mut self, x: Var, target: Vec<f64>, clamp: f64) -> Var {
        let n = self.bufs[x.0].data.len();
        assert_eq!(target.len(), n);
        let xd = &self.bufs[x.0].data;
        let mut s = 0.0;
        for i in 0..n {
            let m = xd[i].clamp(clamp, 1.0 - clamp);
            s -= target[i] * m.ln() + (1.0 - target[i]) * (1.0 - m).ln();
        }
        self.push(Op::Bce { x, target, clamp }, vec![s], 1, 1)
    }

    /// Laplace-CDF density transform `σ = (1/β)·Ψ_β(-s)` with `β = exp(ρ)`
    /// read from the 1×1 parameter block `rho`; gradients flow to both `s`
    /// and `ρ`. Below `beta_floor` the effective β saturates (zero gradient).
    pub fn density_from_sdf(&mut self, s: Var, rho: ParamId, beta_floor: f64) -> Var {
        let (rows, cols) = self.shape(s);
        assert_eq!(cols, 1, "density expects [m,1] sdf values");
        let beta = self.params.block(rho).data[0].exp().max(beta_floor);
        let out = self.bufs[s.0].data.iter().map(|&v| laplace_density(v, beta)).collect();
        self.push(Op::Density { s, rho, beta_floor }, out, rows, 1)
    }

    /// Front-to-back compositing. Output row per ray: `(C_rgb, D, M)` where
    /// `α_i = 1 - exp(-σ_i δ_i)`, `T_i = Π_{j<i}(1 - α_j)`,
    /// `C = Σ T_i α_i c_i`, `D = Σ T_i α_i d_i`, `M = Σ T_i α_i`.
    pub fn composite(&mut self, sigma: Var, color: Var, deltas: Vec<f64>, dists: Vec<f64>, starts: Vec<u32>) -> Var {
        let (m, sc) = self.shape(sigma);
        assert_eq!(sc, 1);
        assert_eq!(self.shape(color), (m, 3));
        assert_eq!(deltas.len(), m);
        assert_eq!(dists.len(), m);
        assert!(!starts.is_empty() && *starts.last().unwrap() as usize == m);
        let rays = starts.len() - 1;
        let sd = &self.bufs[sigma.0].data;
        let cd = &self.bufs[color.0].data;
        let mut out = vec![0.0; rays * 5];
        for r in 0..rays {
            let (s0, s1) = (starts[r] as usize, starts[r + 1] as usize);
            let mut trans = 1.0;
            let o = &mut out[r * 5..r * 5 + 5];
            for i in s0..s1 {
                let alpha = 1.0 - (-(sd[i] * deltas[i]).min(MAX_OPTICAL_DEPTH)).exp();
                let w = trans * alpha;
                o[0] += w * cd[i * 3];
                o[1] += w * cd[i * 3 + 1];
                o[2] += w * cd[i * 3 + 2];
                o[3] += w * dists[i];
                o[4] += w;
                trans *= 1.0 - alpha;
            }
        }
        self.push(Op::Composite { sigma, color, deltas, dists, starts }, out, rays, 5)
    }

    /// Composites rendered color over a background:
    /// `out = c + (1 - m)·bg`.
    pub fn bg_composite(&mut self, c: Var, m: Var, bg: [f64; 3]) -> Var {
        let (rows, cols) = self.shape(c);
        assert_eq!(cols, 3);
        assert_eq!(self.shape(m), (rows, 1));
        let cd = &self.bufs[c.0].data;
        let md = &self.bufs[m.0].data;
        let mut out = vec![0.0; rows * 3];
        for i in 0..rows {
            let rem = 1.0 - md[i];
            for ch in 0..3 {
                out[i * 3 + ch] = cd[i * 3 + ch] + rem * bg[ch];
            }
        }
        self.push(Op::BgComposite { c, m, bg }, out, rows, 3)
    }

    /// Multiresolution hash encoding of positions in `[-1,1]³`. Levels at
    /// index `>= active_levels` produce zeros (coarse-to-fine mask). The
    /// output is `[m, levels·feat]`; gradients flow to the grid entries and
    /// to `pos`.
    pub fn hash_encode(&mut self, grid: ParamId, pos: Var, meta: &HashGridMeta, active_levels: usize) -> Var {
        let (m, cols) = self.shape(pos);
        assert_eq!(cols, 3);
        let active = active_levels.min(meta.levels);
        let gb = self.params.block(grid);
        debug_assert_eq!(gb.data.len(), meta.levels * meta.table_size * meta.feat);
        let feat = meta.feat;
        let width = meta.output_dim();
        let mut out = vec![0.0; m * width];
        let mut cells = Vec::with_capacity(m * active);
        let pd = &self.bufs[pos.0].data;
        for i in 0..m {
            let p = [pd[i * 3], pd[i * 3 + 1], pd[i * 3 + 2]];
            for l in 0..active {
                let cell = hash_cell(p, meta.resolutions[l], meta.table_size);
                let table_off = l * meta.table_size * feat;
                for ci in 0..8 {
                    let w = corner_weight(&cell.frac, ci);
                    let e = table_off + cell.corners[ci] as usize * feat;
                    for f in 0..feat {
                        out[i * width + l * feat + f] += w * gb.data[e + f];
                    }
                }
                cells.push(cell);
            }
        }
        self.push(
            Op::HashEncode { grid, pos, meta: meta.clone(), active_levels: active, cells },
            out,
            m,
            width,
        )
    }

    /// Gathers linear interpolations from a `[nodes, feat]` grid block: each
    /// output row is `(1-w)·grid[lo] + w·grid[hi]`.
    pub fn gather_interp(&mut self, grid: ParamId, pairs: Vec<(u32, u32, f64)>) -> Var {
        let gb = self.params.block(grid);
        let feat = gb.cols;
        let mut out = vec![0.0; pairs.len() * feat];
        for (o, &(lo, hi, w)) in pairs.iter().enumerate() {
            let (lo, hi) = (lo as usize, hi as usize);
            for f in 0..feat {
                out[o * feat + f] = (1.0 - w) * gb.data[lo * feat + f] + w * gb.data[hi * feat + f];
            }
        }
        let n = pairs.len();
        self.push(Op::GatherInterp { grid, pairs }, out, n, feat)
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let out = self.bufs[x.0].data.clone();
        self.push(Op::Detach, out, rows, cols)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from scalar `loss` (seeded with gradient 1), accumulating
    /// parameter gradients into `grads`. Returns per-leaf gradients for
    /// `leaf()` inputs (indexed by Var) on demand via the returned structure.
    pub fn backward(&mut self, loss: Var, grads: &mut GradStore) -> LeafGrads {
        assert_eq!(self.bufs[loss.0].data.len(), 1, "backward expects a scalar loss");
        let n = self.bufs.len();
        let mut g: Vec<Option<Vec<f64>>> = vec![None; n];
        g[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let gy = match g[id].take() {
                Some(v) => v,
                None => continue,
            };
            match &self.ops[id] {
                Op::Leaf { grad } => {
                    if *grad {
                        g[id] = Some(gy); // retained for the caller
                    }
                    continue;
                }
                Op::ParamLeaf { p } => {
                    let acc = grads.block_mut(*p);
                    for (a, &v) in acc.iter_mut().zip(&gy) {
                        *a += v;
                    }
                    continue;
                }
                _ => {}
            }
            // Clone op metadata borrows out of self to appease the borrow
            // checker cheaply: match again by reference below.
            self.backward_op(id, &gy, &mut g, grads);
        }
        LeafGrads { grads: g }
    }

    fn accumulate(g: &mut Vec<Option<Vec<f64>>>, var: Var, len: usize) -> &mut [f64] {
        g[var.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
    }

    fn backward_op(&self, id: usize, gy: &[f64], g: &mut Vec<Option<Vec<f64>>>, grads: &mut GradStore) {
        match &self.ops[id] {
            Op::Leaf { .. } | Op::ParamLeaf { .. } => unreachable!("handled by caller"),
            Op::Linear { x, w, b } => {
                let (m, k) = (self.bufs[x.0].rows, self.bufs[x.0].cols);
                let n = self.params.block(*w).rows;
                let xd = &self.bufs[x.0].data;
                let wd = &self.params.block(*w).data;
                {
                    let gx = Self::accumulate(g, *x, m * k);
                    for i in 0..m {
                        let gyi = &gy[i * n..(i + 1) * n];
                        let gxi = &mut gx[i * k..(i + 1) * k];
                        for j in 0..n {
                            let c = gyi[j];
                            if c != 0.0 {
                                let wj = &wd[j * k..(j + 1) * k];
                                for l in 0..k {
                                    gxi[l] += c * wj[l];
                                }
                            }
                        }
                    }
                }
                {
                    let gw = grads.block_mut(*w);
                    for i in 0..m {
                        let gyi = &gy[i * n..(i + 1) * n];
                        let xi = &xd[i * k..(i + 1) * k];
                        for j in 0..n {
                            let c = gyi[j];
                            if c != 0.0 {
                                let gwj = &mut gw[j * k..(j + 1) * k];
                                for l in 0..k {
                                    gwj[l] += c * xi[l];
                                }
                            }
                        }
                    }
                }
                if let Some(bid) = b {
                    let gb = grads.block_mut(*bid);
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += gy[i * n + j];
                        }
                    }
                }
            }
            Op::Axpy { a, x, b, y } => {
                let len = gy.len();
                {
                    let gx = Self::accumulate(g, *x, len);
                    for (gv, &u) in gx.iter_mut().zip(gy) {
                        *gv += a * u;
                    }
                }
                let gyv = Self::accumulate(g, *y, len);
                for (gv, &u) in gyv.iter_mut().zip(gy) {
                    *gv += b * u;
                }
            }
            Op::Scale { x, c } => {
                let gx = Self::accumulate(g, *x, gy.len());
                for (gv, &u) in gx.iter_mut().zip(gy) {
                    *gv += c * u;
                }
            }
            Op::AddConst { x } => {
                let gx = Self::accumulate(g, *x, gy.len());
                for (gv, &u) in gx.iter_mut().zip(gy) {
                    *gv += u;
                }
            }
            Op::MulElem { x, y } => {
                let xd = self.bufs[x.0].data.clone();
                let yd = &self.bufs[y.0].data;
                {
                    let gx = Self::accumulate(g, *x, gy.len());
                    for i in 0..gy.len() {
                        gx[i] += gy[i] * yd[i];
                    }
                }
                let gyv = Self::accumulate(g, *y, gy.len());
                for i in 0..gy.len() {
                    gyv[i] += gy[i] * xd[i];
                }
            }
            Op::Relu { x } => {
                let xd = &self.bufs[x.0].data;
                let gx = Self::accumulate(g, *x, gy.len());
                for i in 0..gy.len() {
                    if xd[i] > 0.0 {
                        gx[i] += gy[i];
                    }
                }
            }
            Op::SoftplusBeta { x, beta } => {
                let xd = &self.bufs[x.0].data;
                let gx = Self::accumulate(g, *x, gy.len());
                for i in 0..gy.len() {
                    gx[i] += gy[i] * sigmoid(beta * xd[i]);
                }
            }
            Op::Sigmoid { x } => {
                let yd = &self.bufs[id].data;
                let gx = Self::accumulate(g, *x, gy.len());
                for i in 0..gy.len() {
                    gx[i] += gy[i] * yd[i] * (1.0 - yd[i]);
                }
            }
            Op::Exp { x } => {
                let yd = &self.bufs[id].data;
                let gx = Self::accumulate(g, *x, gy.len());
                for i in 0..gy.len() {
                    gx[i] += gy[i] * yd[i];
                }
            }
            Op::Sin { x } => {
                let xd = &self.bufs[x.0].data;
                let gx = Self::accumulate(g, *x, gy.len());
                for i in 0..gy.len() {
                    gx[i] += gy[i] * xd[i].cos();
                }
            }
            Op::Cos { x } => {
                let xd = &self.bufs[x.0].data;
                let gx = Self::accumulate(g, *x, gy.len());
                for i in 0..gy.len() {
                    gx[i] -= gy[i] * xd[i].sin();
                }
            }
            Op::Square { x } => {
                let xd = &self.bufs[x.0].data;
                let gx = Self::accumulate(g, *x, gy.len());
                for i in 0..gy.len() {
                    gx[i] += gy[i] * 2.0 * xd[i];
                }
            }
            Op::Sqrt { x } => {
                let xd = &self.bufs[x.0].data;
                let od = &self.bufs[id].data;
                let gx = Self::accumulate(g, *x, gy.len());
                for i in 0..gy.len() {
                    if xd[i] > 0.0 {
                        gx[i] += gy[i] * 0.5 / od[i];
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xd = &self.bufs[x.0].data;
                let gx = Self::accumulate(g, *x, gy.len());
                for i in 0..gy.len() {
                    if xd[i] > *lo && xd[i] < *hi {
                        gx[i] += gy[i];
                    }
                }
            }
            Op::NormalizeRows3 { x, eps } => {
                let xd = &self.bufs[x.0].data;
                let gx = Self::accumulate(g, *x, xd.len());
                let rows = xd.len() / 3;
                for i in 0..rows {
                    let r = &xd[i * 3..i * 3 + 3];
                    let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                    if n < *eps {
                        continue;
                    }
                    let u = [r[0] / n, r[1] / n, r[2] / n];
                    let gr = &gy[i * 3..i * 3 + 3];
                    let dot = u[0] * gr[0] + u[1] * gr[1] + u[2] * gr[2];
                    for a in 0..3 {
                        gx[i * 3 + a] += (gr[a] - u[a] * dot) / n;
                    }
                }
            }
            Op::RowDotRows { x, dirs } => {
                let rows = self.bufs[x.0].rows;
                let gx = Self::accumulate(g, *x, rows * 3);
                for i in 0..rows {
                    for a in 0..3 {
                        gx[i * 3 + a] += gy[i] * dirs[i * 3 + a];
                    }
                }
            }
            Op::Concat { xs } => {
                let rows = self.bufs[id].rows;
                let total = self.bufs[id].cols;
                let widths: Vec<usize> = xs.iter().map(|v| self.bufs[v.0].cols).collect();
                let mut off = 0;
                for (v, w) in xs.iter().zip(widths) {
                    let gx = Self::accumulate(g, *v, rows * w);
                    for i in 0..rows {
                        for c in 0..w {
                            gx[i * w + c] += gy[i * total + off + c];
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (rows, cols) = (self.bufs[x.0].rows, self.bufs[x.0].cols);
                let gx = Self::accumulate(g, *x, rows * cols);
                for i in 0..rows {
                    for c in 0..*len {
                        gx[i * cols + start + c] += gy[i * len + c];
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let (rows, cols) = (self.bufs[x.0].rows, self.bufs[x.0].cols);
                let gx = Self::accumulate(g, *x, rows * cols);
                for (o, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        gx[i as usize * cols + c] += gy[o * cols + c];
                    }
                }
            }
            Op::BroadcastRow { x, rows } => {
                let cols = self.bufs[x.0].cols;
                let gx = Self::accumulate(g, *x, cols);
                for i in 0..*rows {
                    for c in 0..cols {
                        gx[c] += gy[i * cols + c];
                    }
                }
            }
            Op::GroupMeanRows { x, groups, counts } => {
                let cols = self.bufs[x.0].cols;
                let gx = Self::accumulate(g, *x, groups.len() * cols);
                for (i, &grp) in groups.iter().enumerate() {
                    let inv = 1.0 / counts[grp as usize] as f64;
                    for c in 0..cols {
                        gx[i * cols + c] += gy[grp as usize * cols + c] * inv;
                    }
                }
            }
            Op::SumAll { x } => {
                let len = self.bufs[x.0].data.len();
                let gx = Self::accumulate(g, *x, len);
                for gv in gx.iter_mut() {
                    *gv += gy[0];
                }
            }
            Op::WeightedSumSq { x, w, t } => {
                let xd = &self.bufs[x.0].data;
                let gx = Self::accumulate(g, *x, xd.len());
                for i in 0..xd.len() {
                    gx[i] += gy[0] * 2.0 * w[i] * (xd[i] - t[i]);
                }
            }
            Op::Bce { x, target, clamp } => {
                let xd = &self.bufs[x.0].data;
                let gx = Self::accumulate(g, *x, xd.len());
                for i in 0..xd.len() {
                    if xd[i] > *clamp && xd[i] < 1.0 - *clamp {
                        gx[i] += gy[0] * (xd[i] - target[i]) / (xd[i] * (1.0 - xd[i]));
                    }
                }
            }
            Op::Density { s, rho, beta_floor } => {
                let sd = &self.bufs[s.0].data;
                let beta_raw = self.params.block(*rho).data[0].exp();
                let beta = beta_raw.max(*beta_floor);
                let floored = beta_raw < *beta_floor;
                {
                    let gs = Self::accumulate(g, *s, sd.len());
                    for i in 0..sd.len() {
                        // dσ/ds = -exp(-|s|/β) / (2β²), continuous at s = 0.
                        let e = (-sd[i].abs() / beta).exp();
                        gs[i] += gy[i] * (-0.5 * e / (beta * beta));
                    }
                }
                if !floored {
                    let mut grho = 0.0;
                    for i in 0..sd.len() {
                        let s_i = sd[i];
                        let dsigma_dbeta = if s_i >= 0.0 {
                            0.5 * (-s_i / beta).exp() * (s_i / beta - 1.0) / (beta * beta)
                        } else {
                            (-1.0 + 0.5 * (s_i / beta).exp() * (1.0 + s_i / beta)) / (beta * beta)
                        };
                        grho += gy[i] * dsigma_dbeta;
                    }
                    // Chain through β = exp(ρ).
                    grads.block_mut(*rho)[0] += grho * beta;
                }
            }
            Op::Composite { sigma, color, deltas, dists, starts } => {
                let sd = &self.bufs[sigma.0].data;
                let cd = self.bufs[color.0].data.clone();
                let m = sd.len();
                let rays = starts.len() - 1;
                let mut alphas = vec![0.0f64; m];
                let mut transs = vec![0.0f64; m];
                {
                    let gsig = Self::accumulate(g, *sigma, m);
                    for r in 0..rays {
                        let (s0, s1) = (starts[r] as usize, starts[r + 1] as usize);
                        let mut trans = 1.0;
                        for i in s0..s1 {
                            let od = (sd[i] * deltas[i]).min(MAX_OPTICAL_DEPTH);
                            let alpha = 1.0 - (-od).exp();
                            alphas[i] = alpha;
                            transs[i] = trans;
                            trans *= 1.0 - alpha;
                        }
                        // Reverse sweep with suffix sums Σ_{j>i} T_j α_j q_j.
                        let go = &gy[r * 5..r * 5 + 5];
                        let mut acc = [0.0f64; 5]; // rgb, depth, mass suffixes
                        for i in (s0..s1).rev() {
                            let t_i = transs[i];
                            let a_i = alphas[i];
                            let one_m = 1.0 - a_i;
                            let mut dalpha = 0.0;
                            for ch in 0..3 {
                                dalpha += go[ch] * (t_i * cd[i * 3 + ch] - acc[ch] / one_m);
                            }
                            dalpha += go[3] * (t_i * dists[i] - acc[3] / one_m);
                            dalpha += go[4] * (t_i - acc[4] / one_m);
                            // dα/dσ = δ·exp(-σδ) = δ(1-α)
                            gsig[i] += dalpha * deltas[i] * one_m;
                            let w = t_i * a_i;
                            for ch in 0..3 {
                                acc[ch] += w * cd[i * 3 + ch];
                            }
                            acc[3] += w * dists[i];
                            acc[4] += w;
                        }
                    }
                }
                let gcol = Self::accumulate(g, *color, m * 3);
                for r in 0..rays {
                    let (s0, s1) = (starts[r] as usize, starts[r + 1] as usize);
                    let go = &gy[r * 5..r * 5 + 5];
                    for i in s0..s1 {
                        let w = transs[i] * alphas[i];
                        for ch in 0..3 {
                            gcol[i * 3 + ch] += go[ch] * w;
                        }
                    }
                }
            }
            Op::BgComposite { c, m, bg } => {
                let md = &self.bufs[m.0].data;
                let _ = md;
                let rows = self.bufs[c.0].rows;
                {
                    let gc = Self::accumulate(g, *c, rows * 3);
                    for i in 0..rows * 3 {
                        gc[i] += gy[i];
                    }
                }
                let gm = Self::accumulate(g, *m, rows);
                for i in 0..rows {
                    gm[i] -= gy[i * 3] * bg[0] + gy[i * 3 + 1] * bg[1] + gy[i * 3 + 2] * bg[2];
                }
            }
            Op::HashEncode { grid, pos, meta, active_levels, cells } => {
                let feat = meta.feat;
                let width = meta.output_dim();
                let m = self.bufs[pos.0].rows;
                let gd = &self.params.block(*grid).data;
                {
                    let gt = grads.block_mut(*grid);
                    for i in 0..m {
                        for l in 0..*active_levels {
                            let cell = &cells[i * active_levels + l];
                            let table_off = l * meta.table_size * feat;
                            for ci in 0..8 {
                                let w = corner_weight(&cell.frac, ci);
                                let e = table_off + cell.corners[ci] as usize * feat;
                                for f in 0..feat {
                                    gt[e + f] += w * gy[i * width + l * feat + f];
                                }
                            }
                        }
                    }
                }
                let gp = Self::accumulate(g, *pos, m * 3);
                for i in 0..m {
                    for l in 0..*active_levels {
                        let cell = &cells[i * active_levels + l];
                        let table_off = l * meta.table_size * feat;
                        for ci in 0..8 {
                            let sx = if ci & 1 == 0 { -1.0 } else { 1.0 };
                            let sy = if (ci >> 1) & 1 == 0 { -1.0 } else { 1.0 };
                            let sz = if (ci >> 2) & 1 == 0 { -1.0 } else { 1.0 };
                            let wx = if ci & 1 == 0 { 1.0 - cell.frac[0] } else { cell.frac[0] };
                            let wy = if (ci >> 1) & 1 == 0 { 1.0 - cell.frac[1] } else { cell.frac[1] };
                            let wz = if (ci >> 2) & 1 == 0 { 1.0 - cell.frac[2] } else { cell.frac[2] };
                            let e = table_off + cell.corners[ci] as usize * feat;
                            let mut dot = 0.0;
                            for f in 0..feat {
                                dot += gd[e + f] * gy[i * width + l * feat + f];
                            }
                            gp[i * 3] += dot * sx * wy * wz * cell.dscale[0];
                            gp[i * 3 + 1] += dot * wx * sy * wz * cell.dscale[1];
                            gp[i * 3 + 2] += dot * wx * wy * sz * cell.dscale[2];
                        }
                    }
                }
            }
            Op::GatherInterp { grid, pairs } => {
                let feat = self.params.block(*grid).cols;
                let gt = grads.block_mut(*grid);
                for (o, &(lo, hi, w)) in pairs.iter().enumerate() {
                    for f in 0..feat {
                        gt[lo as usize * feat + f] += (1.0 - w) * gy[o * feat + f];
                        gt[hi as usize * feat + f] += w * gy[o * feat + f];
                    }
                }
            }
            Op::Detach => {}
        }
    }
}

/// Per-leaf gradients retained from a backward pass.
pub struct LeafGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl LeafGrads {
    /// Gradient of the loss w.r.t. a `leaf()` input; `None` if the leaf was
    /// not reached or the Var was not a gradient-tracking leaf.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|o| o.as_deref())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus(βx)/β` with large-argument guard.
#[inline]
pub fn softplus_scaled(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 30.0 {
        x
    } else if bx < -30.0 {
        bx.exp() / beta
    } else {
        bx.exp().ln_1p() / beta
    }
}

/// VolSDF-style density: `σ(s) = (1/β)·Ψ_β(-s)` where `Ψ_β` is the CDF of a
/// zero-mean Laplace distribution with scale β.
#[inline]
pub fn laplace_density(s: f64, beta: f64) -> f64 {
    if s >= 0.0 {
        0.5 / beta * (-s / beta).exp()
    } else {
        (1.0 - 0.5 * (s / beta).exp()) / beta
    }
}

/// Relative error with an absolute floor, used by all finite-difference
/// checks: `|a-b| / max(floor, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / floor.max(a.abs()).max(b.abs())
}

/// Central finite-difference derivative of `f` w.r.t. one entry of one
/// parameter block. Restores the parameter afterwards.
pub fn fd_param_derivative<F: FnMut(&ParamStore) -> f64>(
    params: &mut ParamStore,
    p: ParamId,
    idx: usize,
    h: f64,
    mut f: F,
) -> f64 {
    let orig = params.block(p).data[idx];
    params.block_mut(p).data[idx] = orig + h;
    let hi = f(params);
    params.block_mut(p).data[idx] = orig - h;
    let lo = f(params);
    params.block_mut(p).data[idx] = orig;
    (hi - lo) / (2.0 * h)
}

/// Sweeps central finite differences over *every* entry of the listed blocks
/// and returns the worst relative error against `grads`.
///
/// `floor` guards the relative error for near-zero derivatives; `h` is the
/// absolute step.
pub fn fd_check_blocks<F: FnMut(&ParamStore) -> f64>(
    params: &mut ParamStore,
    grads: &GradStore,
    blocks: &[ParamId],
    h: f64,
    floor: f64,
    mut f: F,
) -> f64 {
    let mut worst = 0.0f64;
    for &p in blocks {
        let n = params.block(p).data.len();
        for idx in 0..n {
            let fd = fd_param_derivative(params, p, idx, h, &mut f);
            let ad = grads.block(p)[idx];
            worst = worst.max(rel_err(ad, fd, floor));
        }
    }
    worst
}

/// Returns an error if `value` is not finite, tagging the loss `term`.
pub fn ensure_finite(term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term, value })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn randn(rng: &mut ChaCha20Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| (rng.gen::<f64>() - 0.5) * 2.0 * scale).collect()
    }

    /// End-to-end FD sweep of a graph exercising most ops: linear → softplus
    /// → hash encode at shifted positions → density → composite → mixed loss.
    #[test]
    fn full_parameter_sweep_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let mut params = ParamStore::new();
        let k = 5;
        let n = 4;
        let w1 = params.register("w1", n, k, randn(&mut rng, n * k, 0.6));
        let b1 = params.register("b1", 1, n, randn(&mut rng, n, 0.2));
        let w2 = params.register("w2", 3, n, randn(&mut rng, 3 * n, 0.6));
        let meta = HashGridMeta::new(3, 2, 6, 4, 16);
        let grid = params.register(
            "grid",
            meta.levels * meta.table_size,
            meta.feat,
            randn(&mut rng, meta.levels * meta.table_size * meta.feat, 0.3),
        );
        let w3 = params.register("w3", 1, meta.output_dim(), randn(&mut rng, meta.output_dim(), 0.5));
        let rho = params.register("rho", 1, 1, vec![(0.3f64).ln()]);
        let tgrid = params.register("tgrid", 4, 2, randn(&mut rng, 8, 0.5));

        let m = 6; // samples, two rays of three
        let xin = randn(&mut rng, m * k, 0.8);
        let base_pos = randn(&mut rng, m * 3, 0.5);
        let deltas = vec![0.1; m];
        let dists: Vec<f64> = (0..m).map(|i| 0.5 + 0.11 * i as f64).collect();
        let starts = vec![0u32, 3, 6];
        let wloss = randn(&mut rng, 2 * 5, 1.0).iter().map(|v| v.abs() + 0.1).collect::<Vec<_>>();
        let tloss = randn(&mut rng, 2 * 5, 1.0);
        let pairs = vec![(0u32, 1u32, 0.3), (2u32, 3u32, 0.85)];

        let build = |p: &ParamStore| -> (f64, Option<(GradStore, ParamStore)>) {
            let mut tape = Tape::new(p);
            let x = tape.constant(xin.clone(), m, k);
            let h1 = tape.linear(x, w1, Some(b1));
            let h1 = tape.softplus_beta(h1, 2.0);
            let disp = tape.linear(h1, w2, None);
            let disp = tape.scale(disp, 0.1);
            let pos0 = tape.constant(base_pos.clone(), m, 3);
            let pos = tape.add(pos0, disp);
            let feats = tape.hash_encode(grid, pos, &meta, meta.levels);
            let s = tape.linear(feats, w3, None);
            let sigma = tape.density_from_sdf(s, rho, 1e-6);
            let albedo = tape.sigmoid(disp);
            let out = tape.composite(sigma, albedo, deltas.clone(), dists.clone(), starts.clone());
            let l1 = tape.weighted_sum_sq(out, wloss.clone(), tloss.clone());
            let code = tape.gather_interp(tgrid, pairs.clone());
            let l2 = tape.sum_all(code);
            let l2 = tape.square(l2);
            let loss = tape.add(l1, l2);
            (tape.scalar(loss), None)
        };

        // Reference gradients.
        let mut grads = GradStore::zeros_like(&params);
        {
            let mut tape = Tape::new(&params);
            let x = tape.constant(xin.clone(), m, k);
            let h1 = tape.linear(x, w1, Some(b1));
            let h1 = tape.softplus_beta(h1, 2.0);
            let disp = tape.linear(h1, w2, None);
            let disp = tape.scale(disp, 0.1);
            let pos0 = tape.constant(base_pos.clone(), m, 3);
            let pos = tape.add(pos0, disp);
            let feats = tape.hash_encode(grid, pos, &meta, meta.levels);
            let s = tape.linear(feats, w3, None);
            let sigma = tape.density_from_sdf(s, rho, 1e-6);
            let albedo = tape.sigmoid(disp);
            let out = tape.composite(sigma, albedo, deltas.clone(), dists.clone(), starts.clone());
            let l1 = tape.weighted_sum_sq(out, wloss.clone(), tloss.clone());
            let code = tape.gather_interp(tgrid, pairs.clone());
            let l2 = tape.sum_all(code);
            let l2 = tape.square(l2);
            let loss = tape.add(l1, l2);
            tape.backward(loss, &mut grads);
        }

        let ids: Vec<ParamId> = params.iter_ids().collect();
        let worst = fd_check_blocks(&mut params, &grads, &ids, 1e-5, 1e-7, |p| build(p).0);
        assert!(worst < 5e-6, "worst relative error {worst:.3e}");
    }

    #[test]
    fn leaf_gradients_flow_through_normalize_and_dot() {
        let params = ParamStore::new();
        let mut grads = GradStore::zeros_like(&params);
        let data = vec![0.3, -0.8, 0.5, 1.2, 0.1, -0.4];
        let dirs = vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let mut tape = Tape::new(&params);
        let x = tape.leaf(data.clone(), 2, 3);
        let n = tape.normalize_rows3(x, 1e-9);
        let d = tape.row_dot_rows(n, dirs.clone());
        let r = tape.relu(d);
        let sq = tape.square(r);
        let loss = tape.sum_all(sq);
        let leafg = tape.backward(loss, &mut grads);
        let ad = leafg.get(x).unwrap().to_vec();

        // FD against the same computation on perturbed leaf values.
        let eval = |vals: &[f64]| {
            let mut t = Tape::new(&params);
            let x = t.constant(vals.to_vec(), 2, 3);
            let n = t.normalize_rows3(x, 1e-9);
            let d = t.row_dot_rows(n, dirs.clone());
            let r = t.relu(d);
            let sq = t.square(r);
            let loss = t.sum_all(sq);
            t.scalar(loss)
        };
        let h = 1e-6;
        for i in 0..data.len() {
            let mut hi = data.clone();
            hi[i] += h;
            let mut lo = data.clone();
            lo[i] -= h;
            let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
            assert!(rel_err(ad[i], fd, 1e-8) < 1e-5, "entry {i}: ad={} fd={}", ad[i], fd);
        }
    }

    #[test]
    fn composite_mass_telescopes() {
        // M must equal 1 - Π(1-α_i) to round-off for random inputs.
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let params = ParamStore::new();
        for _ in 0..200 {
            let m = rng.gen_range(1..32);
            let sigma: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() * 50.0).collect();
            let deltas: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() * 0.05 + 1e-4).collect();
            let dists: Vec<f64> = (0..m).map(|i| i as f64 * 0.05).collect();
            let starts = vec![0u32, m as u32];
            let mut tape = Tape::new(&params);
            let s = tape.constant(sigma.clone(), m, 1);
            let c = tape.constant(vec![0.5; m * 3], m, 3);
            let out = tape.composite(s, c, deltas.clone(), dists, starts);
            let mass = tape.value(out)[4];
            let prod: f64 = sigma
                .iter()
                .zip(&deltas)
                .map(|(&sg, &dl)| (-(sg * dl).min(MAX_OPTICAL_DEPTH)).exp())
                .product();
            assert!((mass - (1.0 - prod)).abs() < 1e-12);
        }
    }

    #[test]
    fn density_matches_laplace_cdf_anchors() {
        // σ(0) = 1/(2β); σ(0.1) with β=0.1 is 10·0.5·e^{-1}.
        assert!((laplace_density(0.0, 0.1) - 5.0).abs() < 1e-12);
        let expect = 10.0 * 0.5 * (-1.0f64).exp();
        assert!((laplace_density(0.1, 0.1) - expect).abs() < 1e-12);
        // Limits: deep inside → 1/β, far outside → 0.
        assert!((laplace_density(-5.0, 0.1) - 10.0).abs() < 1e-6);
        assert!(laplace_density(5.0, 0.1) < 1e-12);
    }

    #[test]
    fn detach_blocks_gradients() {
        let mut params = ParamStore::new();
        let w = params.register("w", 1, 2, vec![0.7, -0.3]);
        let mut grads = GradStore::zeros_like(&params);
        let mut tape = Tape::new(&params);
        let x = tape.constant(vec![1.0, 2.0], 1, 2);
        let y = tape.linear(x, w, None);
        let d = tape.detach(y);
        let sq = tape.square(d);
        let loss = tape.sum_all(sq);
        tape.backward(loss, &mut grads);
        assert!(grads.block(w).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hash_encode_is_trilinear_within_a_cell() {
        // Restricted to one lattice cell the encoding is affine in each
        // coordinate: f(x) sampled at four collinear points has vanishing
        // third differences, and second differences vanish too.
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut params = ParamStore::new();
        let meta = HashGridMeta::new(2, 2, 8, 4, 8);
        let grid = params.register(
            "g",
            meta.levels * meta.table_size,
            meta.feat,
            randn(&mut rng, meta.levels * meta.table_size * meta.feat, 1.0),
        );
        // A segment strictly inside one cell of the finest level (res 8 →
        // cell width 0.25 in [-1,1]; pick x ∈ [0.01, 0.11] within one cell).
        let eval = |x: f64| {
            let mut t = Tape::new(&params);
            let p = t.constant(vec![x, 0.13, 0.21], 1, 3);
            let f = t.hash_encode(grid, p, &meta, meta.levels);
            t.value(f).to_vec()
        };
        let f0 = eval(0.01);
        let f1 = eval(0.04);
        let f2 = eval(0.07);
        let f3 = eval(0.10);
        for i in 0..f0.len() {
            let second = f2[i] - 2.0 * f1[i] + f0[i];
            let second_b = f3[i] - 2.0 * f2[i] + f1[i];
            assert!(second.abs() < 1e-10, "nonlinear along an in-cell segment");
            assert!(second_b.abs() < 1e-10);
        }
    }
}
