//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients into every input that requires
//! one. Nodes are never mutated after they are recorded, so a tape is a plain
//! topologically ordered list.
//!
//! The tape also carries a multiply-accumulate ledger. Convolution and
//! fully-connected kernels report the MAdds they execute under the current
//! [`CostScope`], which gives an execution-level cost oracle independent of
//! any closed-form cost model.

pub mod gradcheck;
pub mod kernels;

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::Dims;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Region of the network a multiply-accumulate is charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CostScope {
    Other,
    Stem,
    /// Convolution block and resolution-change paths of a routed node.
    Node(usize),
    Router(usize),
    Head,
}

/// Per-location classification target: `None` is background.
pub type ClassTargets = Rc<Vec<Option<usize>>>;
/// Per-location `(l, t, r, b)` regression target for positive locations.
pub type BoxTargets = Rc<Vec<Option<[f64; 4]>>>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    MaxOverVector(Var, usize),
    RowMax(Var, Vec<usize>),
    WeightedRowSum(Var, Rc<Vec<f64>>),
    Index(Var, usize),
    Row(Var, usize),
    ConcatCols(Vec<Var>),
    Cosine(Var, Var),
    GateScale { x: Var, gates: Var, col: usize },
    BiasAdd(Var, Var),
    Conv1x1 { x: Var, w: Var, stride: usize },
    Depthwise3x3 { x: Var, w: Var, stride: usize },
    AvgPoolTo { x: Var, oh: usize, ow: usize },
    GlobalAvgPool(Var),
    SampleNorm { x: Var, inv_std: Vec<f64> },
    FullyConnected { x: Var, w: Var, b: Var },
    Upsample2x(Var),
    FocalLoss { logits: Var, targets: ClassTargets, alpha: f64, gamma: f64 },
    IouLoss { pred: Var, targets: BoxTargets },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations and their values.
///
/// A tape built with [`Tape::inference`] never tracks gradients; parameters
/// loaded into it behave like constants.
pub struct Tape {
    nodes: Vec<Node>,
    tracking: bool,
    scope: CostScope,
    madds: BTreeMap<CostScope, u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn dims(t: &Tensor, op: &str) -> Result<Dims> {
    t.dims4()
        .map(|(b, c, h, w)| Dims { b, c, h, w })
        .ok_or_else(|| Error::shape(op, format!("expected B×C×H×W, got {:?}", t.shape())))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Focal loss value and derivative for one logit.
fn focal_term(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if positive {
        let log_p = -softplus(-x);
        let q = (1.0 - p).powf(gamma);
        (-alpha * q * log_p, alpha * q * (gamma * p * log_p - (1.0 - p)))
    } else {
        let log_q = -softplus(x);
        let pg = p.powf(gamma);
        (-(1.0 - alpha) * pg * log_q, (1.0 - alpha) * pg * (p - gamma * (1.0 - p) * log_q))
    }
}

const IOU_FLOOR: f64 = 1e-12;

/// `-ln IoU` for two boxes given as distances from a shared anchor point,
/// plus the derivative with respect to the predicted distances.
fn iou_term(p: [f64; 4], t: [f64; 4]) -> (f64, [f64; 4]) {
    let [l, top, r, b] = p;
    let [tl, tt, tr, tb] = t;
    let area_p = (l + r) * (top + b);
    let area_t = (tl + tr) * (tt + tb);
    let wi = l.min(tl) + r.min(tr);
    let hi = top.min(tt) + b.min(tb);
    let inter = (wi * hi).max(IOU_FLOOR);
    let union = (area_p + area_t - wi * hi).max(IOU_FLOOR);
    let loss = union.ln() - inter.ln();
    let sel = |a: f64, b: f64| if a <= b { 1.0 } else { 0.0 };
    let di = [hi * sel(l, tl), wi * sel(top, tt), hi * sel(r, tr), wi * sel(b, tb)];
    let da = [top + b, l + r, top + b, l + r];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = (da[k] - di[k]) / union - di[k] / inter;
    }
    (loss, grad)
}

impl Tape {
    /// A tape that tracks gradients for parameters.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            tracking: true,
            scope: CostScope::Other,
            madds: BTreeMap::new(),
        }
    }

    /// A tape that never tracks gradients.
    pub fn inference() -> Self {
        Tape {
            tracking: false,
            ..Tape::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn set_scope(&mut self, scope: CostScope) -> CostScope {
        std::mem::replace(&mut self.scope, scope)
    }

    pub fn madds(&self, scope: CostScope) -> u64 {
        self.madds.get(&scope).copied().unwrap_or(0)
    }

    pub fn madds_ledger(&self) -> &BTreeMap<CostScope, u64> {
        &self.madds
    }

    fn charge(&mut self, count: u64) {
        *self.madds.entry(self.scope).or_insert(0) += count;
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.tracking && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient (when tracking).
    pub fn param(&mut self, value: Tensor) -> Var {
        let requires_grad = self.tracking;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let v = self.value(a).map(|x| x + offset);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    /// Clamp into `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(v, Op::Mean(a), &[a])
    }

    /// Maximum of a 1-D vector. The gradient goes to the first maximal entry.
    pub fn max_over_vector(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 1 || t.numel() == 0 {
            return Err(Error::shape("max_over_vector", format!("expected non-empty vector, got {:?}", t.shape())));
        }
        let (arg, max) = first_max(t.data());
        Ok(self.push(Tensor::scalar(max), Op::MaxOverVector(a, arg), &[a]))
    }

    /// Row-wise maximum of a `B×K` matrix, first-max tie break.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [rows, cols] = t.shape()[..] else {
            return Err(Error::shape("row_max", format!("expected B×K, got {:?}", t.shape())));
        };
        let mut args = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (arg, max) = first_max(&t.data()[r * cols..(r + 1) * cols]);
            args.push(arg);
            out.push(max);
        }
        Ok(self.push(Tensor::from_vec(out), Op::RowMax(a, args), &[a]))
    }

    /// `B×K` matrix times a constant `K` vector.
    pub fn weighted_row_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let t = self.value(a);
        let [rows, cols] = t.shape()[..] else {
            return Err(Error::shape("weighted_row_sum", format!("expected B×K, got {:?}", t.shape())));
        };
        if cols != weights.len() {
            return Err(Error::shape("weighted_row_sum", format!("{cols} columns vs {} weights", weights.len())));
        }
        let out = (0..rows)
            .map(|r| t.data()[r * cols..(r + 1) * cols].iter().zip(weights).map(|(x, w)| x * w).sum())
            .collect();
        Ok(self.push(Tensor::from_vec(out), Op::WeightedRowSum(a, Rc::new(weights.to_vec())), &[a]))
    }

    /// Element `i` of a 1-D vector, as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 1 || i >= t.numel() {
            return Err(Error::shape("index", format!("index {i} into {:?}", t.shape())));
        }
        let v = Tensor::scalar(t.data()[i]);
        Ok(self.push(v, Op::Index(a, i), &[a]))
    }

    /// Row `i` of a `B×K` matrix as a `K` vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        let [rows, cols] = t.shape()[..] else {
            return Err(Error::shape("row", format!("expected B×K, got {:?}", t.shape())));
        };
        if i >= rows {
            return Err(Error::shape("row", format!("row {i} of {rows}")));
        }
        let v = Tensor::from_vec(t.data()[i * cols..(i + 1) * cols].to_vec());
        Ok(self.push(v, Op::Row(a, i), &[a]))
    }

    /// Concatenates `B×K_i` matrices along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.shape(p)[..] {
                [r, k] if r == rows => widths.push(k),
                ref s => return Err(Error::shape("concat_cols", format!("expected {rows}×K, got {s:?}"))),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &k) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * k..(r + 1) * k]);
            }
        }
        Ok(self.push(Tensor::new(vec![rows, total], out), Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Cosine similarity of two equal-length vectors. A zero-norm argument
    /// yields 0 with zero gradient.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", u, v)?;
        if self.value(u).ndim() != 1 {
            return Err(Error::shape("cosine_similarity", format!("expected vectors, got {:?}", self.shape(u))));
        }
        let (a, b) = (self.value(u).data(), self.value(v).data());
        let value = cosine(a, b).map_or(0.0, |c| c.value);
        Ok(self.push(Tensor::scalar(value), Op::Cosine(u, v), &[u, v]))
    }

    /// Multiplies each sample of `x` (`B×C×H×W`) by `gates[b, col]`.
    pub fn gate_scale(&mut self, x: Var, gates: Var, col: usize) -> Result<Var> {
        let d = dims(self.value(x), "gate_scale")?;
        let g = self.value(gates);
        match g.shape()[..] {
            [b, k] if b == d.b && col < k => {}
            _ => return Err(Error::shape("gate_scale", format!("gates {:?} for input {:?}, col {col}", g.shape(), self.shape(x)))),
        }
        let k = g.shape()[1];
        let per = d.c * d.plane();
        let mut out = self.value(x).clone();
        for (b, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let s = g.data()[b * k + col];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::GateScale { x, gates, col }, &[x, gates]))
    }

    /// Adds a per-channel bias to a `B×C×H×W` map.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = dims(self.value(x), "bias_add")?;
        if self.shape(bias) != [d.c] {
            return Err(Error::shape("bias_add", format!("bias {:?} for {} channels", self.shape(bias), d.c)));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(d.plane()).enumerate() {
            let bc = bv[i % d.c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        Ok(self.push(out, Op::BiasAdd(x, bias), &[x, bias]))
    }

    /// Pointwise convolution with weight `C_out×C_in`, stride 1 or 2, no bias.
    pub fn conv2d_1x1(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let d = dims(self.value(x), "conv2d_1x1")?;
        check_stride("conv2d_1x1", stride)?;
        let co = match self.shape(w)[..] {
            [co, ci] if ci == d.c => co,
            ref s => return Err(Error::shape("conv2d_1x1", format!("weight {s:?} for input {:?}", self.shape(x)))),
        };
        let mut count = 0;
        let out = kernels::conv1x1_forward(self.value(x).data(), d, self.value(w).data(), co, stride, &mut count);
        self.charge(count);
        let shape = vec![d.b, co, kernels::strided_len(d.h, stride), kernels::strided_len(d.w, stride)];
        Ok(self.push(Tensor::new(shape, out), Op::Conv1x1 { x, w, stride }, &[x, w]))
    }

    /// 3×3 depthwise convolution, padding 1, weight `C×9`.
    pub fn depthwise_conv3x3(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let d = dims(self.value(x), "depthwise_conv3x3")?;
        check_stride("depthwise_conv3x3", stride)?;
        if self.shape(w) != [d.c, 9] {
            return Err(Error::shape("depthwise_conv3x3", format!("weight {:?} for {} channels", self.shape(w), d.c)));
        }
        let mut count = 0;
        let out = kernels::depthwise3x3_forward(self.value(x).data(), d, self.value(w).data(), stride, &mut count);
        self.charge(count);
        let shape = vec![d.b, d.c, kernels::strided_len(d.h, stride), kernels::strided_len(d.w, stride)];
        Ok(self.push(Tensor::new(shape, out), Op::Depthwise3x3 { x, w, stride }, &[x, w]))
    }

    /// Depthwise 3×3 (strided) followed by a pointwise projection.
    pub fn depthwise_separable_conv3x3(&mut self, x: Var, w_dw: Var, w_pw: Var, stride: usize) -> Result<Var> {
        let mid = self.depthwise_conv3x3(x, w_dw, stride)?;
        self.conv2d_1x1(mid, w_pw, 1)
    }

    /// Average pooling to a fixed output size; input sizes must divide evenly.
    pub fn avg_pool_to(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let d = dims(self.value(x), "avg_pool_to")?;
        if oh == 0 || ow == 0 || d.h % oh != 0 || d.w % ow != 0 {
            return Err(Error::shape("avg_pool_to", format!("{}×{} does not pool to {oh}×{ow}", d.h, d.w)));
        }
        let out = kernels::avg_pool_forward(self.value(x).data(), d, oh, ow);
        Ok(self.push(Tensor::new(vec![d.b, d.c, oh, ow], out), Op::AvgPoolTo { x, oh, ow }, &[x]))
    }

    /// Standardizes each sample over all of its `C×H×W` values, with no
    /// learned scale or shift, so a zero input stays zero.
    pub fn sample_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let d = dims(self.value(x), "sample_norm")?;
        let n = d.c * d.h * d.w;
        let mut out = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(d.b);
        for chunk in out.chunks_mut(n) {
            let mean = chunk.iter().sum::<f64>() / n as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out), Op::SampleNorm { x, inv_std }, &[x]))
    }

    /// `B×C×H×W` to `B×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let d = dims(self.value(x), "global_avg_pool")?;
        let out = kernels::avg_pool_forward(self.value(x).data(), d, 1, 1);
        Ok(self.push(Tensor::new(vec![d.b, d.c], out), Op::GlobalAvgPool(x), &[x]))
    }

    /// `x·wᵀ + b` with `x: B×C_in`, `w: C_out×C_in`, `b: C_out`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, ci) = match self.shape(x)[..] {
            [r, c] => (r, c),
            ref s => return Err(Error::shape("fully_connected", format!("input {s:?}"))),
        };
        let co = match self.shape(w)[..] {
            [co, c] if c == ci => co,
            ref s => return Err(Error::shape("fully_connected", format!("weight {s:?} for {ci} inputs"))),
        };
        if self.shape(b) != [co] {
            return Err(Error::shape("fully_connected", format!("bias {:?} for {co} outputs", self.shape(b))));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * co);
        for r in 0..rows {
            let xr = &xv[r * ci..(r + 1) * ci];
            for o in 0..co {
                let dot: f64 = xr.iter().zip(&wv[o * ci..(o + 1) * ci]).map(|(p, q)| p * q).sum();
                out.push(dot + bv[o]);
            }
        }
        self.charge((rows * co * ci) as u64);
        Ok(self.push(Tensor::new(vec![rows, co], out), Op::FullyConnected { x, w, b }, &[x, w, b]))
    }

    /// 2× bilinear upsampling with half-pixel (align-corners-false) sampling.
    pub fn bilinear_upsample_2x(&mut self, x: Var) -> Result<Var> {
        let d = dims(self.value(x), "bilinear_upsample_2x")?;
        let out = kernels::upsample2x_forward(self.value(x).data(), d);
        Ok(self.push(Tensor::new(vec![d.b, d.c, 2 * d.h, 2 * d.w], out), Op::Upsample2x(x), &[x]))
    }

    /// Sigmoid focal loss summed per sample. `targets` holds one entry per
    /// `(b, y, x)` location; `Some(k)` marks class `k` positive.
    pub fn sigmoid_focal_loss(&mut self, logits: Var, targets: ClassTargets, alpha: f64, gamma: f64) -> Result<Var> {
        let d = dims(self.value(logits), "sigmoid_focal_loss")?;
        if targets.len() != d.b * d.plane() {
            return Err(Error::shape("sigmoid_focal_loss", format!("{} targets for {:?}", targets.len(), self.shape(logits))));
        }
        let x = self.value(logits).data();
        let mut out = vec![0.0; d.b];
        for b in 0..d.b {
            for k in 0..d.c {
                for p in 0..d.plane() {
                    let positive = targets[b * d.plane() + p] == Some(k);
                    out[b] += focal_term(x[(b * d.c + k) * d.plane() + p], positive, alpha, gamma).0;
                }
            }
        }
        Ok(self.push(Tensor::from_vec(out), Op::FocalLoss { logits, targets, alpha, gamma }, &[logits]))
    }

    /// `-ln IoU` summed per sample over locations with a box target.
    /// `pred` is `B×4×H×W` holding nonnegative `(l, t, r, b)` distances.
    pub fn iou_loss(&mut self, pred: Var, targets: BoxTargets) -> Result<Var> {
        let d = dims(self.value(pred), "iou_loss")?;
        if d.c != 4 || targets.len() != d.b * d.plane() {
            return Err(Error::shape("iou_loss", format!("{} targets for {:?}", targets.len(), self.shape(pred))));
        }
        let x = self.value(pred).data();
        let mut out = vec![0.0; d.b];
        for b in 0..d.b {
            for p in 0..d.plane() {
                if let Some(t) = targets[b * d.plane() + p] {
                    let pv = std::array::from_fn(|k| x[(b * 4 + k) * d.plane() + p]);
                    out[b] += iou_term(pv, t).0;
                }
            }
        }
        Ok(self.push(Tensor::from_vec(out), Op::IouLoss { pred, targets }, &[pred]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data)
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let ga = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                self.accumulate(grads, a, self.like(a, ga));
                self.accumulate(grads, b, self.like(b, gb));
            }
            &Op::Scale(a, f) => self.accumulate(grads, a, g.map(|x| x * f)),
            &Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            &Op::Square(a) => {
                let d = gd.iter().zip(self.value(a).data()).map(|(g, x)| 2.0 * x * g).collect();
                self.accumulate(grads, a, self.like(a, d));
            }
            &Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, a, self.like(a, d));
            }
            &Op::Tanh(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, a, self.like(a, d));
            }
            &Op::Exp(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                self.accumulate(grads, a, self.like(a, d));
            }
            &Op::Clamp(a, lo, hi) => {
                let d = gd
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, &x)| if (lo..=hi).contains(&x) { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, a, self.like(a, d));
            }
            &Op::Sum(a) => self.accumulate(grads, a, Tensor::full(self.shape(a), g.item())),
            &Op::Mean(a) => {
                let n = self.value(a).numel() as f64;
                self.accumulate(grads, a, Tensor::full(self.shape(a), g.item() / n));
            }
            &Op::MaxOverVector(a, arg) => {
                let mut d = vec![0.0; self.value(a).numel()];
                d[arg] = g.item();
                self.accumulate(grads, a, self.like(a, d));
            }
            Op::RowMax(a, args) => {
                let cols = self.shape(*a)[1];
                let mut d = vec![0.0; self.value(*a).numel()];
                for (r, &arg) in args.iter().enumerate() {
                    d[r * cols + arg] = gd[r];
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::WeightedRowSum(a, w) => {
                let cols = w.len();
                let d = (0..self.value(*a).numel()).map(|i| gd[i / cols] * w[i % cols]).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            &Op::Index(a, i) => {
                let mut d = vec![0.0; self.value(a).numel()];
                d[i] = g.item();
                self.accumulate(grads, a, self.like(a, d));
            }
            &Op::Row(a, i) => {
                let cols = self.shape(a)[1];
                let mut d = vec![0.0; self.value(a).numel()];
                d[i * cols..(i + 1) * cols].copy_from_slice(gd);
                self.accumulate(grads, a, self.like(a, d));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let k = self.shape(p)[1];
                    let mut d = Vec::with_capacity(rows * k);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + k]);
                    }
                    offset += k;
                    self.accumulate(grads, p, self.like(p, d));
                }
            }
            &Op::Cosine(u, v) => {
                let (a, b) = (self.value(u).data(), self.value(v).data());
                if let Some(c) = cosine(a, b) {
                    let gv = g.item();
                    let gu = (0..a.len())
                        .map(|i| gv * (b[i] / (c.norm_a * c.norm_b) - c.value * a[i] / (c.norm_a * c.norm_a)))
                        .collect();
                    let gw = (0..a.len())
                        .map(|i| gv * (a[i] / (c.norm_a * c.norm_b) - c.value * b[i] / (c.norm_b * c.norm_b)))
                        .collect();
                    self.accumulate(grads, u, self.like(u, gu));
                    self.accumulate(grads, v, self.like(v, gw));
                }
            }
            &Op::GateScale { x, gates, col } => {
                let xv = self.value(x);
                let gt = self.value(gates);
                let k = gt.shape()[1];
                let batch = xv.shape()[0];
                let per = xv.numel() / batch;
                let mut dx = vec![0.0; xv.numel()];
                let mut dg = vec![0.0; gt.numel()];
                for b in 0..batch {
                    let s = gt.data()[b * k + col];
                    let range = b * per..(b + 1) * per;
                    let mut acc = 0.0;
                    for i in range {
                        dx[i] = gd[i] * s;
                        acc += gd[i] * xv.data()[i];
                    }
                    dg[b * k + col] = acc;
                }
                self.accumulate(grads, x, self.like(x, dx));
                self.accumulate(grads, gates, self.like(gates, dg));
            }
            &Op::BiasAdd(x, bias) => {
                let c = self.shape(bias)[0];
                let plane = out.shape()[2] * out.shape()[3];
                let mut db = vec![0.0; c];
                for (i, chunk) in gd.chunks(plane).enumerate() {
                    db[i % c] += chunk.iter().sum::<f64>();
                }
                self.accumulate(grads, x, g.clone());
                self.accumulate(grads, bias, self.like(bias, db));
            }
            &Op::Conv1x1 { x, w, stride } => {
                let d = dims(self.value(x), "conv2d_1x1").expect("recorded shape");
                let co = self.shape(w)[0];
                let (dx, dw) = kernels::conv1x1_backward(self.value(x).data(), d, self.value(w).data(), co, stride, gd);
                self.accumulate(grads, x, self.like(x, dx));
                self.accumulate(grads, w, self.like(w, dw));
            }
            &Op::Depthwise3x3 { x, w, stride } => {
                let d = dims(self.value(x), "depthwise_conv3x3").expect("recorded shape");
                let (dx, dw) = kernels::depthwise3x3_backward(self.value(x).data(), d, self.value(w).data(), stride, gd);
                self.accumulate(grads, x, self.like(x, dx));
                self.accumulate(grads, w, self.like(w, dw));
            }
            &Op::AvgPoolTo { x, oh, ow } => {
                let d = dims(self.value(x), "avg_pool_to").expect("recorded shape");
                self.accumulate(grads, x, self.like(x, kernels::avg_pool_backward(d, oh, ow, gd)));
            }
            Op::SampleNorm { x, inv_std } => {
                let n = out.numel() / inv_std.len();
                let mut dx = vec![0.0; gd.len()];
                for (b, &inv) in inv_std.iter().enumerate() {
                    let (y, g, dst) = (&out.data()[b * n..(b + 1) * n], &gd[b * n..(b + 1) * n], &mut dx[b * n..(b + 1) * n]);
                    let g_mean = g.iter().sum::<f64>() / n as f64;
                    let gy_mean = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for ((o, &gi), &yi) in dst.iter_mut().zip(g).zip(y) {
                        *o = inv * (gi - g_mean - yi * gy_mean);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            &Op::GlobalAvgPool(x) => {
                let d = dims(self.value(x), "global_avg_pool").expect("recorded shape");
                self.accumulate(grads, x, self.like(x, kernels::avg_pool_backward(d, 1, 1, gd)));
            }
            &Op::FullyConnected { x, w, b } => {
                let (xv, wv) = (self.value(x).data(), self.value(w).data());
                let (rows, ci) = (self.shape(x)[0], self.shape(x)[1]);
                let co = self.shape(w)[0];
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; co];
                for r in 0..rows {
                    for o in 0..co {
                        let gv = gd[r * co + o];
                        db[o] += gv;
                        for i in 0..ci {
                            dx[r * ci + i] += gv * wv[o * ci + i];
                            dw[o * ci + i] += gv * xv[r * ci + i];
                        }
                    }
                }
                self.accumulate(grads, x, self.like(x, dx));
                self.accumulate(grads, w, self.like(w, dw));
                self.accumulate(grads, b, self.like(b, db));
            }
            &Op::Upsample2x(x) => {
                let d = dims(self.value(x), "bilinear_upsample_2x").expect("recorded shape");
                self.accumulate(grads, x, self.like(x, kernels::upsample2x_backward(d, gd)));
            }
            Op::FocalLoss { logits, targets, alpha, gamma } => {
                let xv = self.value(*logits);
                let d = dims(xv, "sigmoid_focal_loss").expect("recorded shape");
                let mut dx = vec![0.0; xv.numel()];
                for b in 0..d.b {
                    for k in 0..d.c {
                        for p in 0..d.plane() {
                            let i = (b * d.c + k) * d.plane() + p;
                            let positive = targets[b * d.plane() + p] == Some(k);
                            dx[i] = gd[b] * focal_term(xv.data()[i], positive, *alpha, *gamma).1;
                        }
                    }
                }
                self.accumulate(grads, *logits, self.like(*logits, dx));
            }
            Op::IouLoss { pred, targets } => {
                let xv = self.value(*pred);
                let d = dims(xv, "iou_loss").expect("recorded shape");
                let mut dx = vec![0.0; xv.numel()];
                for b in 0..d.b {
                    for p in 0..d.plane() {
                        if let Some(t) = targets[b * d.plane() + p] {
                            let pv = std::array::from_fn(|k| xv.data()[(b * 4 + k) * d.plane() + p]);
                            let (_, dp) = iou_term(pv, t);
                            for (k, v) in dp.iter().enumerate() {
                                dx[(b * 4 + k) * d.plane() + p] = gd[b] * v;
                            }
                        }
                    }
                }
                self.accumulate(grads, *pred, self.like(*pred, dx));
            }
        }
    }
}

fn check_stride(op: &str, stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(Error::Config(format!("{op}: stride must be 1 or 2, got {stride}")))
    }
}

fn first_max(xs: &[f64]) -> (usize, f64) {
    let mut arg = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[arg] {
            arg = i;
        }
    }
    (arg, xs[arg])
}

struct Cosine {
    value: f64,
    norm_a: f64,
    norm_b: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> Option<Cosine> {
    let norm_a = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_b = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some(Cosine {
        value: dot / (norm_a * norm_b),
        norm_a,
        norm_b,
    })
}
