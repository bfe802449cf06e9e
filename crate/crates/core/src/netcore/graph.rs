//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients. A graph may be
//! differentiated once.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::params::ParamSet;
use super::tensor::{gemm_nn, gemm_nt, gemm_tn};
use super::NetError;
use crate::geometry::BBox;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// One bilinear tap set: four weighted reads from a single feature map.
#[derive(Debug, Clone, Copy)]
struct RoiSample {
    map: usize,
    idx: [usize; 4],
    weight: [f64; 4],
}

/// Largest log-scale change allowed when decoding box deltas.
pub const MAX_LOG_SCALE: f64 = 4.135166556742356; // ln(1000 / 16)

pub const BATCH_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param(String),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Conv2d { x: Var, w: Var, b: Var, cols: Vec<f64>, geom: ConvGeom },
    Upsample2x(Var),
    Linear { x: Var, w: Var, b: Var },
    GlobalAvgPool(Var),
    RoiAlign { maps: Vec<Var>, samples: Vec<RoiSample>, grid: usize },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    BatchNormRows { x: Var, inv_std: Vec<f64> },
    RowDot(Var, Var),
    ChwToRows(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    DecodeBoxes { deltas: Var, refs: Vec<BBox>, clamped: Vec<bool> },
    Fused { inputs: Vec<(Var, Vec<f64>)>, kinks: Vec<bool> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the loss with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    track_params: bool,
    differentiated: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that tracks gradients for non-frozen parameters.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), track_params: true, differentiated: false }
    }

    /// A graph in which every parameter is a constant.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), track_params: false, differentiated: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input.
    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var, NetError> {
        check_len(shape, &data)?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Differentiable leaf that is not a parameter (used by gradient checks).
    pub fn variable(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var, NetError> {
        check_len(shape, &data)?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, true))
    }

    /// Copy of `v` through which no gradient flows.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var, NetError> {
        let p = params
            .get(name)
            .ok_or_else(|| NetError::MissingParam(name.to_string()))?;
        let requires = self.track_params && !p.frozen;
        Ok(self.push(
            p.tensor.shape().to_vec(),
            p.tensor.data().to_vec(),
            Op::Param(name.to_string()),
            requires,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * factor).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.value(a).iter().sum::<f64>() / n;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Relu(a), rg)
    }

    /// 2-D convolution on a single `[C, H, W]` map with a `[Cout, C, k, k]` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NetError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if self.shape(b) != [ws[0]] {
            return Err(shape_err("conv2d bias", self.shape(b), &[ws[0]]));
        }
        let k = ws[2];
        let (h, wd) = (xs[1], xs[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d input too small", &xs, &ws));
        }
        let geom = ConvGeom {
            cin: xs[0],
            h,
            w: wd,
            cout: ws[0],
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.value(x), &geom);
        let hw = geom.ho * geom.wo;
        let kk = geom.cin * k * k;
        let mut out = vec![0.0; geom.cout * hw];
        for (co, &bv) in self.value(b).iter().enumerate() {
            out[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = bv);
        }
        gemm_nn(geom.cout, kk, hw, self.value(w), &cols, &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            vec![geom.cout, geom.ho, geom.wo],
            out,
            Op::Conv2d { x, w, b, cols, geom },
            rg,
        ))
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, NetError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("upsample2x", &s, &[0, 0, 0]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, 2 * h, 2 * w], out, Op::Upsample2x(x), rg))
    }

    /// `y[N, out] = x[N, in] * w[out, in]^T + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NetError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(shape_err("linear", &xs, &ws));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(self.value(b));
        }
        gemm_nt(n, din, dout, self.value(x), self.value(w), &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![n, dout], out, Op::Linear { x, w, b }, rg))
    }

    /// Mean over spatial positions: `[C, H, W] -> [1, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NetError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("global_avg_pool", &s, &[0, 0, 0]));
        }
        let plane = s[1] * s[2];
        let out = self
            .value(x)
            .chunks_exact(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![1, s[0]], out, Op::GlobalAvgPool(x), rg))
    }

    /// Bilinear pooling of a `grid x grid` lattice of cell centers inside
    /// each box. `rois` holds `(box, level)`; level `l` reads `maps[l]` whose
    /// stride is `strides[l]`. Output is `[N, C * grid * grid]`, channel-major.
    pub fn roi_align(
        &mut self,
        maps: &[Var],
        strides: &[f64],
        rois: &[(BBox, usize)],
        grid: usize,
    ) -> Result<Var, NetError> {
        let c = self.shape(maps[0])[0];
        for &m in maps {
            let s = self.shape(m);
            if s.len() != 3 || s[0] != c {
                return Err(shape_err("roi_align maps", s, &[c]));
            }
        }
        let gg = grid * grid;
        let mut samples = Vec::with_capacity(rois.len() * gg);
        for &(b, level) in rois {
            let s = self.shape(maps[level]);
            let (h, w) = (s[1], s[2]);
            let stride = strides[level];
            for gy in 0..grid {
                for gx in 0..grid {
                    let px = b.x0() + (gx as f64 + 0.5) * b.w() / grid as f64;
                    let py = b.y0() + (gy as f64 + 0.5) * b.h() / grid as f64;
                    let fx = (px / stride - 0.5).clamp(0.0, (w - 1) as f64);
                    let fy = (py / stride - 0.5).clamp(0.0, (h - 1) as f64);
                    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
                    samples.push(RoiSample {
                        map: level,
                        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
                        weight: [
                            (1.0 - ax) * (1.0 - ay),
                            ax * (1.0 - ay),
                            (1.0 - ax) * ay,
                            ax * ay,
                        ],
                    });
                }
            }
        }
        let n = rois.len();
        let mut out = vec![0.0; n * c * gg];
        for (r, chunk) in samples.chunks_exact(gg.max(1)).enumerate().take(n) {
            for (g, smp) in chunk.iter().enumerate() {
                let m = maps[smp.map];
                let s = self.shape(m);
                let plane = s[1] * s[2];
                let src = self.value(m);
                for ch in 0..c {
                    let base = ch * plane;
                    let v: f64 = (0..4).map(|t| smp.weight[t] * src[base + smp.idx[t]]).sum();
                    out[r * c * gg + ch * gg + g] = v;
                }
            }
        }
        let rg = maps.iter().any(|&m| self.rg(m));
        Ok(self.push(
            vec![n, c * gg],
            out,
            Op::RoiAlign { maps: maps.to_vec(), samples, grid },
            rg,
        ))
    }

    /// Scale each row to unit L2 norm. Errors on an all-zero row.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, NetError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("l2_normalize_rows", &s, &[0, 0]));
        }
        let d = s[1];
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(s[0] * d);
        for row in self.value(x).chunks_exact(d.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(NetError::ZeroNorm);
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let rg = self.rg(x);
        Ok(self.push(s, out, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Standardizes every column of `[N, D]` with batch statistics
    /// (biased variance plus `BATCH_NORM_EPS`), no affine part.
    pub fn batch_norm_rows(&mut self, x: Var) -> Result<Var, NetError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] < 2 {
            return Err(shape_err("batch_norm_rows", &s, &[2, 0]));
        }
        let (n, d) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![0.0; n * d];
        let mut inv_std = Vec::with_capacity(d);
        for j in 0..d {
            let mean = (0..n).map(|i| v[i * d + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (v[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + BATCH_NORM_EPS).sqrt();
            for i in 0..n {
                out[i * d + j] = (v[i * d + j] - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        Ok(self.push(s, out, Op::BatchNormRows { x, inv_std }, rg))
    }

    /// Row-wise dot product of two `[N, D]` matrices, giving `[N]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || self.shape(b) != s.as_slice() {
            return Err(shape_err("row_dot", &s, self.shape(b)));
        }
        let d = s[1].max(1);
        let out = self
            .value(a)
            .chunks_exact(d)
            .zip(self.value(b).chunks_exact(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![s[0]], out, Op::RowDot(a, b), rg))
    }

    /// `[A * group, H, W] -> [H * W * A, group]`, location-major.
    pub fn chw_to_rows(&mut self, x: Var, group: usize) -> Result<Var, NetError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || group == 0 || s[0] % group != 0 {
            return Err(shape_err("chw_to_rows", &s, &[group]));
        }
        let (c, plane) = (s[0], s[1] * s[2]);
        let a = c / group;
        let src = self.value(x);
        let mut out = vec![0.0; c * plane];
        for p in 0..plane {
            for ch in 0..c {
                out[p * c + ch] = src[ch * plane + p];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![plane * a, group], out, Op::ChwToRows(x), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NetError> {
        let d = self.shape(parts[0])[1];
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(shape_err("concat_rows", s, &[rows, d]));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, d], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NetError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) {
            return Err(shape_err("select_rows", &s, &[rows.len()]));
        }
        let d = s[1];
        let src = self.value(x);
        let out = rows.iter().flat_map(|&r| src[r * d..(r + 1) * d].iter().copied()).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![rows.len(), d], out, Op::SelectRows(x, rows.to_vec()), rg))
    }

    /// Decode `[N, 4]` deltas against reference boxes into `[N, 4]` boxes in
    /// `(cx, cy, w, h)`. Log-scales are clamped to [`MAX_LOG_SCALE`].
    pub fn decode_boxes(&mut self, deltas: Var, refs: &[BBox]) -> Result<Var, NetError> {
        let s = self.shape(deltas).to_vec();
        if s != [refs.len(), 4] {
            return Err(shape_err("decode_boxes", &s, &[refs.len(), 4]));
        }
        let mut out = Vec::with_capacity(refs.len() * 4);
        let mut clamped = Vec::with_capacity(refs.len() * 2);
        for (d, r) in self.value(deltas).chunks_exact(4).zip(refs) {
            let (dw, dh) = (d[2].min(MAX_LOG_SCALE), d[3].min(MAX_LOG_SCALE));
            clamped.push(d[2] > MAX_LOG_SCALE);
            clamped.push(d[3] > MAX_LOG_SCALE);
            out.extend([r.cx() + d[0] * r.w(), r.cy() + d[1] * r.h(), r.w() * dw.exp(), r.h() * dh.exp()]);
        }
        let rg = self.rg(deltas);
        Ok(self.push(
            s,
            out,
            Op::DecodeBoxes { deltas, refs: refs.to_vec(), clamped },
            rg,
        ))
    }

    /// Scalar node whose local gradients were computed analytically by the
    /// caller: `inputs[i].1` is `d value / d inputs[i].0`. `kinks` records
    /// branch decisions for [`Graph::kink_signature`].
    pub fn fused_scalar(
        &mut self,
        value: f64,
        inputs: Vec<(Var, Vec<f64>)>,
        kinks: Vec<bool>,
    ) -> Result<Var, NetError> {
        for (v, g) in &inputs {
            if g.len() != self.value(*v).len() {
                return Err(shape_err("fused_scalar", self.shape(*v), &[g.len()]));
            }
        }
        let rg = inputs.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(vec![1], vec![value], Op::Fused { inputs, kinks }, rg))
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, NetError> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(NetError::NotScalar);
            }
            total += w * self.scalar(v);
        }
        let rg = terms.iter().any(|&(v, w)| w != 0.0 && self.rg(v));
        Ok(self.push(vec![1], vec![total], Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Hash of every piecewise branch taken in the forward pass (ReLU masks,
    /// clamps, loss branches). Two evaluations with equal signatures lie on
    /// the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(_) => n.value.iter().for_each(|v| (*v > 0.0).hash(&mut h)),
                Op::DecodeBoxes { clamped, .. } => clamped.hash(&mut h),
                Op::Fused { kinks, .. } => kinks.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Differentiate `loss` and add parameter gradients into `params`.
    /// Frozen or untracked parameters receive nothing.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> Result<Gradients, NetError> {
        let grads = self.backward_only(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            let (Op::Param(name), Some(g)) = (&node.op, &grads.grads[i]) else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(p) = params.get_mut(name) else { continue };
            if p.frozen {
                continue;
            }
            match p.tensor.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => p.tensor.grad = Some(g.clone()),
            }
        }
        Ok(grads)
    }

    /// Differentiate without touching any parameter store.
    pub fn backward_only(&mut self, loss: Var) -> Result<Gradients, NetError> {
        if self.differentiated {
            return Err(NetError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(NetError::NotScalar);
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Scale(a, f) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += f * y)),
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len().max(1) as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Relu(a) => acc(*a, &mut |s| {
                for ((x, y), out) in s.iter_mut().zip(g).zip(&node.value) {
                    if *out > 0.0 {
                        *x += y;
                    }
                }
            }),
            Op::Conv2d { x, w, b, cols, geom } => {
                let hw = geom.ho * geom.wo;
                let kk = geom.cin * geom.k * geom.k;
                acc(*b, &mut |s| {
                    for (co, sv) in s.iter_mut().enumerate() {
                        *sv += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
                    }
                });
                acc(*w, &mut |s| gemm_nt(geom.cout, hw, kk, g, cols, s));
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![0.0; kk * hw];
                    gemm_tn(kk, geom.cout, hw, &self.nodes[w.0].value, g, &mut dcols);
                    acc(*x, &mut |s| col2im(&dcols, geom, s));
                }
            }
            Op::Upsample2x(a) => {
                let s = &self.nodes[a.0].shape;
                let (c, h, w) = (s[0], s[1], s[2]);
                acc(*a, &mut |dst| {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let dout = self.nodes[w.0].shape[0];
                acc(*b, &mut |s| {
                    for row in g.chunks_exact(dout) {
                        s.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                });
                acc(*w, &mut |s| gemm_tn(dout, n, din, g, &self.nodes[x.0].value, s));
                acc(*x, &mut |s| gemm_nn(n, dout, din, g, &self.nodes[w.0].value, s));
            }
            Op::GlobalAvgPool(a) => {
                let s = &self.nodes[a.0].shape;
                let plane = s[1] * s[2];
                acc(*a, &mut |dst| {
                    for (ch, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                        let v = g[ch] / plane as f64;
                        chunk.iter_mut().for_each(|d| *d += v);
                    }
                });
            }
            Op::RoiAlign { maps, samples, grid } => {
                let gg = grid * grid;
                let c = self.nodes[maps[0].0].shape[0];
                for (level, &m) in maps.iter().enumerate() {
                    let ms = &self.nodes[m.0].shape;
                    let plane = ms[1] * ms[2];
                    acc(m, &mut |dst| {
                        for (k, smp) in samples.iter().enumerate() {
                            if smp.map != level {
                                continue;
                            }
                            let (r, gi) = (k / gg, k % gg);
                            for ch in 0..c {
                                let up = g[r * c * gg + ch * gg + gi];
                                if up == 0.0 {
                                    continue;
                                }
                                for t in 0..4 {
                                    dst[ch * plane + smp.idx[t]] += smp.weight[t] * up;
                                }
                            }
                        }
                    });
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = node.shape[1];
                acc(*x, &mut |dst| {
                    for (r, norm) in norms.iter().enumerate() {
                        let y = &node.value[r * d..(r + 1) * d];
                        let gy = &g[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dst[r * d + j] += (gy[j] - y[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::BatchNormRows { x, inv_std } => {
                let (n, d) = (node.shape[0], node.shape[1]);
                acc(*x, &mut |dst| {
                    for (j, inv) in inv_std.iter().enumerate() {
                        let gm = (0..n).map(|i| g[i * d + j]).sum::<f64>() / n as f64;
                        let gy = (0..n).map(|i| g[i * d + j] * node.value[i * d + j]).sum::<f64>() / n as f64;
                        for i in 0..n {
                            dst[i * d + j] += inv * (g[i * d + j] - gm - node.value[i * d + j] * gy);
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let d = self.nodes[a.0].shape[1];
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |dst| {
                    for (k, v) in dst.iter_mut().enumerate() {
                        *v += g[k / d] * bv[k];
                    }
                });
                acc(*b, &mut |dst| {
                    for (k, v) in dst.iter_mut().enumerate() {
                        *v += g[k / d] * av[k];
                    }
                });
            }
            Op::ChwToRows(x) => {
                let s = &self.nodes[x.0].shape;
                let (c, plane) = (s[0], s[1] * s[2]);
                acc(*x, &mut |dst| {
                    for p in 0..plane {
                        for ch in 0..c {
                            dst[ch * plane + p] += g[p * c + ch];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(p, &mut |dst| {
                        dst.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b)
                    });
                    offset += len;
                }
            }
            Op::SelectRows(x, rows) => {
                let d = node.shape[1];
                acc(*x, &mut |dst| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            dst[r * d + j] += g[k * d + j];
                        }
                    }
                });
            }
            Op::DecodeBoxes { deltas, refs, clamped } => {
                acc(*deltas, &mut |dst| {
                    for (k, r) in refs.iter().enumerate() {
                        let out = &node.value[k * 4..k * 4 + 4];
                        dst[k * 4] += g[k * 4] * r.w();
                        dst[k * 4 + 1] += g[k * 4 + 1] * r.h();
                        if !clamped[k * 2] {
                            dst[k * 4 + 2] += g[k * 4 + 2] * out[2];
                        }
                        if !clamped[k * 2 + 1] {
                            dst[k * 4 + 3] += g[k * 4 + 3] * out[3];
                        }
                    }
                });
            }
            Op::Fused { inputs, .. } => {
                for (v, local) in inputs {
                    acc(*v, &mut |dst| dst.iter_mut().zip(local).for_each(|(a, l)| *a += g[0] * l));
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, &mut |dst| dst[0] += w * g[0]);
                }
            }
        }
    }
}

fn check_len(shape: &[usize], data: &[f64]) -> Result<(), NetError> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(NetError::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
    }
    Ok(())
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> NetError {
    NetError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut cols = vec![0.0; g.cin * g.k * g.k * hw];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &dcols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::gradcheck::{check_gradient, GradCheck};
    use crate::netcore::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn sum_gives_ones() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_vec(&[3], vec![0.5, -2.0, 4.0]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&ps, "w").unwrap();
        let s = g.sum(w);
        g.backward(s, &mut ps).unwrap();
        assert_eq!(ps.tensor("w").unwrap().grad.as_deref(), Some(&[1.0, 1.0, 1.0][..]));
    }

    #[test]
    fn half_square_norm_gives_w() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_vec(&[1, 3], vec![0.5, -2.0, 4.0]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&ps, "w").unwrap();
        let d = g.row_dot(w, w).unwrap();
        let half = g.scale(d, 0.5);
        let loss = g.sum(half);
        g.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.tensor("w").unwrap().grad.as_deref(), Some(&[0.5, -2.0, 4.0][..]));
    }

    #[test]
    fn backward_twice_is_error() {
        let mut g = Graph::new();
        let x = g.variable(&[2], vec![1.0, 2.0]).unwrap();
        let s = g.sum(x);
        g.backward_only(s).unwrap();
        assert!(matches!(g.backward_only(s), Err(NetError::BackwardTwice)));
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        ps.insert("b", Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        ps.set_frozen("a", true);
        let mut g = Graph::new();
        let a = g.param(&ps, "a").unwrap();
        let b = g.param(&ps, "b").unwrap();
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        g.backward(l, &mut ps).unwrap();
        assert!(ps.tensor("a").unwrap().grad.is_none());
        assert!(ps.tensor("b").unwrap().grad.is_some());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cin, h, w, cout, k) = (2, 5, 6, 3, 3);
        let x = rand_vec(&mut rng, cin * h * w);
        let wt = rand_vec(&mut rng, cout * cin * k * k);
        let b = rand_vec(&mut rng, cout);
        let mut g = Graph::new();
        let xv = g.input(&[cin, h, w], x.clone()).unwrap();
        let wv = g.input(&[cout, cin, k, k], wt.clone()).unwrap();
        let bv = g.input(&[cout], b.clone()).unwrap();
        let y = g.conv2d(xv, wv, bv, 2, 1).unwrap();
        let (ho, wo) = (3, 3);
        assert_eq!(g.shape(y), &[cout, ho, wo]);
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += wt[((co * cin + ci) * k + ky) * k + kx]
                                        * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((g.value(y)[(co * ho + oy) * wo + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn primitive_ops_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let x0 = rand_vec(&mut rng, 2 * 4 * 4);
            let w0 = rand_vec(&mut rng, 3 * 2 * 9);
            let b0 = rand_vec(&mut rng, 3);
            let l0 = rand_vec(&mut rng, 5 * 3);
            let lb = rand_vec(&mut rng, 5);
            let probe = rand_vec(&mut rng, 4 * 5);
            let build = |g: &mut Graph, x: Var| -> Result<Var, NetError> {
                let w = g.input(&[3, 2, 3, 3], w0.clone())?;
                let b = g.input(&[3], b0.clone())?;
                let c = g.conv2d(x, w, b, 1, 1)?; // [3,4,4]
                let r = g.relu(c);
                let up = g.upsample2x(r)?; // [3,8,8]
                let pooled = g.global_avg_pool(up)?; // [1,3]
                let rows = g.chw_to_rows(r, 3)?; // [16,3]
                let both = g.concat_rows(&[pooled, rows])?;
                let sel = g.select_rows(both, &[0, 3, 5, 16])?;
                let lw = g.input(&[5, 3], l0.clone())?;
                let lbv = g.input(&[5], lb.clone())?;
                let lin = g.linear(sel, lw, lbv)?; // [4,5]
                let n = g.l2_normalize_rows(lin)?;
                let p = g.input(&[4, 5], probe.clone())?;
                let d = g.row_dot(n, p)?;
                Ok(g.mean(d))
            };
            let report = check_gradient(&[2, 4, 4], &x0, 1e-3, |g, x| build(g, x)).unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }

    #[test]
    fn roi_align_gradient_and_constant_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let maps = rand_vec(&mut rng, 2 * 6 * 6);
        let boxes = [
            (BBox::new(20.0, 18.0, 14.0, 10.0).unwrap(), 0usize),
            (BBox::new(20.0, 18.0, 14.0, 10.0).unwrap(), 0usize),
        ];
        let report: GradCheck = check_gradient(&[2, 6, 6], &maps, 1e-3, |g, x| {
            let pooled = g.roi_align(&[x], &[8.0], &boxes, 3)?;
            let probe: Vec<f64> = (0..2 * 18).map(|i| (i as f64 * 0.37).sin()).collect();
            let p = g.input(&[2, 18], probe)?;
            let d = g.row_dot(pooled, p)?;
            Ok(g.sum(d))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");

        let mut g = Graph::new();
        let x = g.input(&[2, 6, 6], maps).unwrap();
        let pooled = g.roi_align(&[x], &[8.0], &boxes, 3).unwrap();
        let v = g.value(pooled);
        assert_eq!(&v[..18], &v[18..]);

        let mut g = Graph::new();
        let x = g.input(&[1, 6, 6], vec![0.75; 36]).unwrap();
        let pooled = g.roi_align(&[x], &[8.0], &boxes[..1], 3).unwrap();
        assert!(g.value(pooled).iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn batch_norm_standardizes_and_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x0 = rand_vec(&mut rng, 6 * 4);
        let mut g = Graph::new();
        let x = g.input(&[6, 4], x0.clone()).unwrap();
        let y = g.batch_norm_rows(x).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..6).map(|i| g.value(y)[i * 4 + j]).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3, "{mean} {var}");
        }
        for _ in 0..5 {
            let x0 = rand_vec(&mut rng, 6 * 4);
            let probe = rand_vec(&mut rng, 6 * 4);
            let report = check_gradient(&[6, 4], &x0, 1e-4, |g, x| {
                let y = g.batch_norm_rows(x)?;
                let r = g.relu(y);
                let p = g.input(&[6, 4], probe.clone())?;
                let d = g.row_dot(r, p)?;
                Ok(g.sum(d))
            })
            .unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }

    #[test]
    fn zero_row_normalization_errors() {
        let mut g = Graph::new();
        let x = g.input(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(g.l2_normalize_rows(x), Err(NetError::ZeroNorm)));
    }
}
