//! Reverse-mode automatic differentiation over dynamic-dimension f64 arrays.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks the graph in reverse and accumulates gradients for every node that
//! requires them. All math is f64 so analytic gradients can be checked against
//! central finite differences directly.
//!
//! The op set is intentionally small: dense matmul (the workhorse behind
//! linear layers and im2col convolutions), a fused scaled-dot-product
//! attention, fused layer norm / softmax / losses, and the structural ops
//! (reshape, permute, concat, slice) that window partitioning and axis
//! swapping are built from.

use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, IxDyn};
use std::collections::HashMap;

pub type Arr = ArrayD<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    /// Constant input; `requires_grad` decides whether gradients flow to it.
    Leaf,
    /// Parameter leaf; the originating slot is tracked in `Tape::param_vars`.
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    Matmul(Var, Var),
    /// Per-head matrix product `[l,h,d] x [h,d,p] -> [l,h,p]`.
    HeadMatmul(Var, Var),
    Relu(Var),
    Gelu(Var),
    /// Softmax over the last axis.
    SoftmaxLast(Var),
    /// Layer normalization over the last axis with affine parameters.
    LayerNorm { x: Var, gamma: Var, beta: Var },
    /// Fused softmax(q kᵀ · scale) v over `[b, t, d]` batches.
    Attention { q: Var, k: Var, v: Var, scale: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize, len: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    /// 2-D convolution, x `[cin,h,w]`, w `[cout,cin,kh,kw]`, via im2col.
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    /// Max over the first `counts[p]` rows of x `[p,k,c] -> [p,c]`; empty rows give 0.
    MaskedMaxPool { x: Var, counts: Vec<usize> },
    /// Scatter pillar rows `[p,c]` into a `[c,h,w]` grid at `coords[p] = (row,col)`.
    ScatterPillars { x: Var, coords: Vec<(usize, usize)> },
    /// Sum of focal loss over sigmoid logits with per-element weights.
    FocalLoss { logits: Var, targets: Arr, weights: Arr, alpha: f64, gamma: f64 },
    /// Sum of smooth-L1 over (pred - target) with per-element weights.
    SmoothL1 { pred: Var, target: Arr, weights: Arr, beta: f64 },
}

struct Node {
    value: Arr,
    op: Op,
    requires_grad: bool,
    /// Op-specific context saved for the backward pass (softmax probs, im2col buffers, ...).
    saved: Vec<Arr>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    grads: Vec<Option<Arr>>,
    by_param: HashMap<usize, usize>,
}

impl Grads {
    /// Gradient with respect to an arbitrary tape variable, if it was tracked.
    pub fn wrt(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
    /// Gradient with respect to a parameter slot, if the parameter was used.
    pub fn param(&self, slot: usize) -> Option<&Arr> {
        self.by_param.get(&slot).and_then(|&idx| self.grads[idx].as_ref())
    }
}

fn broadcast_to(a: &Arr, shape: &[usize]) -> Arr {
    if a.shape() == shape {
        return a.clone();
    }
    a.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape))
        .to_owned()
}

/// Sum `g` down to `shape` (inverse of NumPy-style right-aligned broadcasting).
fn reduce_to_shape(g: &Arr, shape: &[usize]) -> Arr {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && out.shape()[ax] > 1 {
            let summed = out.sum_axis(Axis(ax));
            out = summed.insert_axis(Axis(ax));
        }
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

fn mat2<'a>(a: &'a Arr) -> ndarray::ArrayView2<'a, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-D array")
}

fn matmul2(a: &Arr, b: &Arr) -> Arr {
    let (a2, b2) = (mat2(a), mat2(b));
    let mut c = ndarray::Array2::<f64>::zeros((a2.nrows(), b2.ncols()));
    ndarray::linalg::general_mat_mul(1.0, &a2, &b2, 0.0, &mut c);
    c.into_dyn()
}

fn softmax_last(x: &Arr) -> Arr {
    let mut y = x.clone();
    let last = y.ndim() - 1;
    for mut row in y.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    let _ = last;
    y
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(z)), computed without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn im2col(x: &Arr, kh: usize, kw: usize, stride: usize, pad: usize) -> Arr {
    let xs = x.view().into_dimensionality::<Ix3>().unwrap();
    let (cin, h, w) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut cols = ndarray::Array2::<f64>::zeros((cin * kh * kw, oh * ow));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * ow + ox)] = xs[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols.into_dyn()
}

fn col2im(
    gcols: &Arr,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Arr {
    let g = mat2(gcols);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut gx = ndarray::Array3::<f64>::zeros((cin, h, w));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[(ci, iy as usize, ix as usize)] += g[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
    gx.into_dyn()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Arr, op: Op, requires_grad: bool, saved: Vec<Arr>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, saved });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient flows to it.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf, false, vec![])
    }

    /// Input leaf that tracks gradients (for input-sensitivity checks).
    pub fn input(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf, true, vec![])
    }

    /// Parameter leaf, deduplicated per slot so repeated layer calls share one node.
    pub fn param(&mut self, slot: usize, value: &Arr) -> Var {
        if let Some(&v) = self.param_vars.get(&slot) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true, vec![]);
        self.param_vars.insert(slot, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = broadcast_shape(self.shape(a), self.shape(b));
        let value = &broadcast_to(self.value(a), &shape) + &broadcast_to(self.value(b), &shape);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg, vec![])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let shape = broadcast_shape(self.shape(a), self.shape(b));
        let value = &broadcast_to(self.value(a), &shape) - &broadcast_to(self.value(b), &shape);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg, vec![])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let shape = broadcast_shape(self.shape(a), self.shape(b));
        let value = &broadcast_to(self.value(a), &shape) * &broadcast_to(self.value(b), &shape);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg, vec![])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg, vec![])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul2(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Matmul(a, b), rg, vec![])
    }

    /// `[l,h,d] x [h,d,p] -> [l,h,p]`, one matmul per head.
    pub fn head_matmul(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix3>().unwrap();
        let (l, h, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(h, wv.shape()[0], "head count mismatch");
        assert_eq!(d, wv.shape()[1], "head dim mismatch");
        let p = wv.shape()[2];
        let mut out = ndarray::Array3::<f64>::zeros((l, h, p));
        for hi in 0..h {
            let xh = xv.index_axis(Axis(1), hi);
            let wh = wv.index_axis(Axis(0), hi);
            let mut oh = out.index_axis_mut(Axis(1), hi);
            ndarray::linalg::general_mat_mul(1.0, &xh, &wh, 0.0, &mut oh);
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(out.into_dyn(), Op::HeadMatmul(x, w), rg, vec![])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg, vec![])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x.powi(3))).tanh()));
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg, vec![])
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let value = softmax_last(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxLast(a), rg, vec![])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = *xv.shape().last().expect("layer_norm needs >=1 axis") as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.len() / c as usize);
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(s);
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
        }
        let g = broadcast_to(self.value(gamma), xv.shape());
        let b = broadcast_to(self.value(beta), xv.shape());
        let value = &xhat * &g + &b;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let inv = ArrayD::from_shape_vec(IxDyn(&[inv_std.len()]), inv_std).unwrap();
        self.push(value, Op::LayerNorm { x, gamma, beta }, rg, vec![xhat, inv])
    }

    /// Fused attention: out[b] = softmax(q[b] k[b]ᵀ · scale) v[b].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Var {
        let qv = self.value(q).view().into_dimensionality::<Ix3>().unwrap();
        let kv = self.value(k).view().into_dimensionality::<Ix3>().unwrap();
        let vv = self.value(v).view().into_dimensionality::<Ix3>().unwrap();
        let (bn, tq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let tk = kv.shape()[1];
        assert_eq!(kv.shape()[0], bn);
        assert_eq!(vv.shape()[0], bn);
        assert_eq!(kv.shape()[2], d);
        assert_eq!(vv.shape()[1], tk);
        let dv = vv.shape()[2];
        let mut out = ndarray::Array3::<f64>::zeros((bn, tq, dv));
        let mut probs = ndarray::Array3::<f64>::zeros((bn, tq, tk));
        for bi in 0..bn {
            let qb = qv.index_axis(Axis(0), bi);
            let kb = kv.index_axis(Axis(0), bi);
            let vb = vv.index_axis(Axis(0), bi);
            let mut s = ndarray::Array2::<f64>::zeros((tq, tk));
            ndarray::linalg::general_mat_mul(scale, &qb, &kb.t(), 0.0, &mut s);
            for mut row in s.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                let invs = 1.0 / sum;
                for x in row.iter_mut() {
                    *x *= invs;
                }
            }
            let mut ob = out.index_axis_mut(Axis(0), bi);
            ndarray::linalg::general_mat_mul(1.0, &s.view(), &vb, 0.0, &mut ob);
            probs.index_axis_mut(Axis(0), bi).assign(&s);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out.into_dyn(), Op::Attention { q, k, v, scale }, rg, vec![probs.into_dyn()])
    }

    /// Softmax probabilities saved by the most recent [`Tape::attention`] on `v`.
    pub fn attention_probs(&self, v: Var) -> Option<&Arr> {
        match self.nodes[v.0].op {
            Op::Attention { .. } => self.nodes[v.0].saved.first(),
            _ => None,
        }
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty());
        let views: Vec<ArrayViewD<f64>> = inputs.iter().map(|&v| self.value(v).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, rg, vec![])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self
            .value(x)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let rg = self.rg(x);
        self.push(value, Op::Slice { x, axis, start, len }, rg, vec![])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape element count mismatch");
        let value = v
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape failed");
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg, vec![])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let value = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let rg = self.rg(x);
        self.push(value, Op::Permute { x, axes: axes.to_vec() }, rg, vec![])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let value = self.value(x).sum_axis(Axis(axis));
        let rg = self.rg(x);
        self.push(value, Op::SumAxis { x, axis }, rg, vec![])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = ndarray::arr0(self.value(x).sum()).into_dyn();
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg, vec![])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let value = ndarray::arr0(self.value(x).sum() / n).into_dyn();
        let rg = self.rg(x);
        self.push(value, Op::MeanAll(x), rg, vec![])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let wshape = self.shape(w).to_vec();
        let (cout, _cin, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        let cols = im2col(self.value(x), kh, kw, stride, pad);
        let xs = self.shape(x).to_vec();
        let oh = (xs[1] + 2 * pad - kh) / stride + 1;
        let ow = (xs[2] + 2 * pad - kw) / stride + 1;
        let w2d = self
            .value(w)
            .view()
            .into_shape_with_order(IxDyn(&[cout, wshape[1] * kh * kw]))
            .unwrap()
            .to_owned();
        let mut out2d = matmul2(&w2d, &cols);
        if let Some(bv) = b {
            let bias = self.value(bv).clone();
            for (mut row, &bi) in out2d
                .view_mut()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .rows_mut()
                .into_iter()
                .zip(bias.view().into_dimensionality::<Ix1>().unwrap())
            {
                row += bi;
            }
        }
        let value = out2d.into_shape_with_order(IxDyn(&[cout, oh, ow])).unwrap();
        let rg = self.rg(x) || self.rg(w) || b.map(|bv| self.rg(bv)).unwrap_or(false);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg, vec![cols])
    }

    pub fn masked_max_pool(&mut self, x: Var, counts: &[usize]) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (p, k, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(counts.len(), p);
        let mut out = ndarray::Array2::<f64>::zeros((p, c));
        let mut arg = ndarray::Array2::<f64>::zeros((p, c));
        for pi in 0..p {
            let n = counts[pi].min(k);
            for ci in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0usize;
                for ki in 0..n {
                    let v = xv[(pi, ki, ci)];
                    if v > best {
                        best = v;
                        bi = ki;
                    }
                }
                if n > 0 {
                    out[(pi, ci)] = best;
                    arg[(pi, ci)] = bi as f64;
                } else {
                    arg[(pi, ci)] = -1.0;
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            out.into_dyn(),
            Op::MaskedMaxPool { x, counts: counts.to_vec() },
            rg,
            vec![arg.into_dyn()],
        )
    }

    pub fn scatter_pillars(&mut self, x: Var, coords: &[(usize, usize)], h: usize, w: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let (p, c) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(coords.len(), p);
        let mut out = ndarray::Array3::<f64>::zeros((c, h, w));
        for (pi, &(r, cc)) in coords.iter().enumerate() {
            for ci in 0..c {
                out[(ci, r, cc)] = xv[(pi, ci)];
            }
        }
        let rg = self.rg(x);
        self.push(
            out.into_dyn(),
            Op::ScatterPillars { x, coords: coords.to_vec() },
            rg,
            vec![],
        )
    }

    /// Σ_i w_i · FL(logit_i, y_i) with FL the α/γ focal loss on sigmoid logits.
    pub fn focal_loss_sum(
        &mut self,
        logits: Var,
        targets: Arr,
        weights: Arr,
        alpha: f64,
        gamma: f64,
    ) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape());
        assert_eq!(z.shape(), weights.shape());
        let mut total = 0.0;
        for ((&zi, &yi), &wi) in z.iter().zip(targets.iter()).zip(weights.iter()) {
            if wi == 0.0 {
                continue;
            }
            let p = stable_sigmoid(zi);
            let l = if yi > 0.5 {
                -alpha * (1.0 - p).powf(gamma) * log_sigmoid(zi)
            } else {
                -(1.0 - alpha) * p.powf(gamma) * log_sigmoid(-zi)
            };
            total += wi * l;
        }
        let rg = self.rg(logits);
        self.push(
            ndarray::arr0(total).into_dyn(),
            Op::FocalLoss { logits, targets, weights, alpha, gamma },
            rg,
            vec![],
        )
    }

    /// Σ_i w_i · smoothL1(pred_i - target_i; β).
    pub fn smooth_l1_sum(&mut self, pred: Var, target: Arr, weights: Arr, beta: f64) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape());
        assert_eq!(p.shape(), weights.shape());
        let mut total = 0.0;
        for ((&pi, &ti), &wi) in p.iter().zip(target.iter()).zip(weights.iter()) {
            if wi == 0.0 {
                continue;
            }
            let d = (pi - ti).abs();
            let l = if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
            total += wi * l;
        }
        let rg = self.rg(pred);
        self.push(
            ndarray::arr0(total).into_dyn(),
            Op::SmoothL1 { pred, target, weights, beta },
            rg,
            vec![],
        )
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Arr::ones(self.value(loss).raw_dim()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut by_param = HashMap::new();
        for (&slot, &v) in &self.param_vars {
            by_param.insert(slot, v.0);
        }
        Grads { grads, by_param }
    }

    fn accum(&self, grads: &mut [Option<Arr>], v: Var, contrib: Arr) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &contrib,
            slot => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Arr, grads: &mut [Option<Arr>]) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, reduce_to_shape(g, self.shape(*a)));
                self.accum(grads, *b, reduce_to_shape(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, reduce_to_shape(g, self.shape(*a)));
                self.accum(grads, *b, reduce_to_shape(&(-g.clone()), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let shape = self.nodes[idx].value.shape();
                let av = broadcast_to(self.value(*a), shape);
                let bv = broadcast_to(self.value(*b), shape);
                self.accum(grads, *a, reduce_to_shape(&(g * &bv), self.shape(*a)));
                self.accum(grads, *b, reduce_to_shape(&(g * &av), self.shape(*b)));
            }
            Op::Scale(a, c) => {
                self.accum(grads, *a, g * *c);
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let gb2 = {
                    let mut out =
                        ndarray::Array2::<f64>::zeros((self.shape(*b)[0], self.shape(*b)[1]));
                    ndarray::linalg::general_mat_mul(1.0, &mat2(av).t(), &mat2(g), 0.0, &mut out);
                    out.into_dyn()
                };
                let ga2 = {
                    let mut out =
                        ndarray::Array2::<f64>::zeros((self.shape(*a)[0], self.shape(*a)[1]));
                    ndarray::linalg::general_mat_mul(1.0, &mat2(g), &mat2(bv).t(), 0.0, &mut out);
                    out.into_dyn()
                };
                self.accum(grads, *a, ga2);
                self.accum(grads, *b, gb2);
            }
            Op::HeadMatmul(x, w) => {
                let xv = self.value(*x).view().into_dimensionality::<Ix3>().unwrap();
                let wv = self.value(*w).view().into_dimensionality::<Ix3>().unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let (l, h, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let p = wv.shape()[2];
                let mut gx = ndarray::Array3::<f64>::zeros((l, h, d));
                let mut gw = ndarray::Array3::<f64>::zeros((h, d, p));
                for hi in 0..h {
                    let xh = xv.index_axis(Axis(1), hi);
                    let wh = wv.index_axis(Axis(0), hi);
                    let gh = gv.index_axis(Axis(1), hi);
                    let mut gxh = gx.index_axis_mut(Axis(1), hi);
                    ndarray::linalg::general_mat_mul(1.0, &gh, &wh.t(), 0.0, &mut gxh);
                    let mut gwh = gw.index_axis_mut(Axis(0), hi);
                    ndarray::linalg::general_mat_mul(1.0, &xh.t(), &gh, 0.0, &mut gwh);
                }
                self.accum(grads, *x, gx.into_dyn());
                self.accum(grads, *w, gw.into_dyn());
            }
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accum(grads, *a, g * &mask);
            }
            Op::Gelu(a) => {
                let d = self.value(*a).mapv(|x| {
                    let u = GELU_C * (x + 0.044715 * x.powi(3));
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
                });
                self.accum(grads, *a, g * &d);
            }
            Op::SoftmaxLast(a) => {
                // dx = y ⊙ (g − rowsum(g ⊙ y))
                let y = &self.nodes[idx].value;
                let mut gx = g * y;
                for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                    let s: f64 = grow.sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow.iter()) {
                        *gv -= s * yv;
                    }
                }
                self.accum(grads, *a, gx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xhat = &self.nodes[idx].saved[0];
                let inv_std = &self.nodes[idx].saved[1];
                let c = *xhat.shape().last().unwrap() as f64;
                let gfull = broadcast_to(self.value(*gamma), xhat.shape());
                // dβ and dγ reduce over all leading axes.
                let gbeta = reduce_to_shape(g, self.shape(*beta));
                let ggamma = reduce_to_shape(&(g * xhat), self.shape(*gamma));
                // dx per row: (1/σ)(dxhat − mean(dxhat) − xhat·mean(dxhat⊙xhat))
                let dxhat = g * &gfull;
                let mut gx = dxhat.clone();
                let mut inv_iter = inv_std.iter();
                for (mut row, xrow) in gx.rows_mut().into_iter().zip(xhat.rows()) {
                    let s = *inv_iter.next().unwrap();
                    let m1: f64 = row.sum() / c;
                    let m2: f64 =
                        row.iter().zip(xrow.iter()).map(|(a, b)| a * b).sum::<f64>() / c;
                    for (gv, &xv) in row.iter_mut().zip(xrow.iter()) {
                        *gv = s * (*gv - m1 - xv * m2);
                    }
                }
                self.accum(grads, *x, gx);
                self.accum(grads, *gamma, ggamma);
                self.accum(grads, *beta, gbeta);
            }
            Op::Attention { q, k, v, scale } => {
                let probs = &self.nodes[idx].saved[0];
                let pv = probs.view().into_dimensionality::<Ix3>().unwrap();
                let qv = self.value(*q).view().into_dimensionality::<Ix3>().unwrap();
                let kv = self.value(*k).view().into_dimensionality::<Ix3>().unwrap();
                let vv = self.value(*v).view().into_dimensionality::<Ix3>().unwrap();
                let gv3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (bn, tq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
                let (tk, dv) = (kv.shape()[1], vv.shape()[2]);
                let mut gq = ndarray::Array3::<f64>::zeros((bn, tq, d));
                let mut gk = ndarray::Array3::<f64>::zeros((bn, tk, d));
                let mut gvv = ndarray::Array3::<f64>::zeros((bn, tk, dv));
                for bi in 0..bn {
                    let pb = pv.index_axis(Axis(0), bi);
                    let gb = gv3.index_axis(Axis(0), bi);
                    let vb = vv.index_axis(Axis(0), bi);
                    let qb = qv.index_axis(Axis(0), bi);
                    let kb = kv.index_axis(Axis(0), bi);
                    // dV = Pᵀ g
                    let mut gvb = gvv.index_axis_mut(Axis(0), bi);
                    ndarray::linalg::general_mat_mul(1.0, &pb.t(), &gb, 0.0, &mut gvb);
                    // dP = g Vᵀ
                    let mut gp = ndarray::Array2::<f64>::zeros((tq, tk));
                    ndarray::linalg::general_mat_mul(1.0, &gb, &vb.t(), 0.0, &mut gp);
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                    for (mut gprow, prow) in gp.rows_mut().into_iter().zip(pb.rows()) {
                        let s: f64 =
                            gprow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                        for (gpv, &pvv) in gprow.iter_mut().zip(prow.iter()) {
                            *gpv = pvv * (*gpv - s);
                        }
                    }
                    let mut gqb = gq.index_axis_mut(Axis(0), bi);
                    ndarray::linalg::general_mat_mul(*scale, &gp.view(), &kb, 0.0, &mut gqb);
                    let mut gkb = gk.index_axis_mut(Axis(0), bi);
                    ndarray::linalg::general_mat_mul(*scale, &gp.t(), &qb, 0.0, &mut gkb);
                }
                self.accum(grads, *q, gq.into_dyn());
                self.accum(grads, *k, gk.into_dyn());
                self.accum(grads, *v, gvv.into_dyn());
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0usize;
                for &inp in inputs {
                    let len = self.shape(inp)[*axis];
                    let piece = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    self.accum(grads, inp, piece);
                    start += len;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let mut gx = Arr::zeros(self.value(*x).raw_dim());
                gx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + *len))
                    .assign(g);
                self.accum(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let gx = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(self.value(*x).raw_dim())
                    .unwrap();
                self.accum(grads, *x, gx);
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let gx = g.view().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned();
                self.accum(grads, *x, gx);
            }
            Op::SumAxis { x, axis } => {
                let expanded = g.clone().insert_axis(Axis(*axis));
                self.accum(grads, *x, broadcast_to(&expanded, self.shape(*x)));
            }
            Op::SumAll(x) => {
                let gv = *g.iter().next().unwrap();
                self.accum(grads, *x, Arr::from_elem(self.value(*x).raw_dim(), gv));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len() as f64;
                let gv = *g.iter().next().unwrap() / n;
                self.accum(grads, *x, Arr::from_elem(self.value(*x).raw_dim(), gv));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let cols = &self.nodes[idx].saved[0];
                let wshape = self.shape(*w).to_vec();
                let (cout, cin, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
                let xs = self.shape(*x).to_vec();
                let ohow = self.nodes[idx].value.len() / cout;
                let g2d = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[cout, ohow]))
                    .unwrap();
                // dW = g2d · colsᵀ
                let mut gw2d = ndarray::Array2::<f64>::zeros((cout, cin * kh * kw));
                ndarray::linalg::general_mat_mul(1.0, &mat2(&g2d), &mat2(cols).t(), 0.0, &mut gw2d);
                let gw = gw2d
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                    .unwrap();
                self.accum(grads, *w, gw);
                if let Some(bv) = b {
                    let gb = g2d.sum_axis(Axis(1));
                    self.accum(grads, *bv, gb.into_dyn());
                }
                // dX = col2im(wᵀ · g2d)
                let w2d = self
                    .value(*w)
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[cout, cin * kh * kw]))
                    .unwrap();
                let mut gcols = ndarray::Array2::<f64>::zeros((cin * kh * kw, ohow));
                ndarray::linalg::general_mat_mul(1.0, &mat2(&w2d).t(), &mat2(&g2d), 0.0, &mut gcols);
                let gx = col2im(&gcols.into_dyn(), cin, xs[1], xs[2], kh, kw, *stride, *pad);
                self.accum(grads, *x, gx);
            }
            Op::MaskedMaxPool { x, counts } => {
                let arg = &self.nodes[idx].saved[0];
                let argv = arg.view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Arr::zeros(self.value(*x).raw_dim());
                let c = gv.shape()[1];
                for pi in 0..counts.len() {
                    for ci in 0..c {
                        let a = argv[(pi, ci)];
                        if a >= 0.0 {
                            gx[[pi, a as usize, ci]] += gv[(pi, ci)];
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::ScatterPillars { x, coords } => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let c = gv.shape()[0];
                let mut gx = ndarray::Array2::<f64>::zeros((coords.len(), c));
                for (pi, &(r, cc)) in coords.iter().enumerate() {
                    for ci in 0..c {
                        gx[(pi, ci)] = gv[(ci, r, cc)];
                    }
                }
                self.accum(grads, *x, gx.into_dyn());
            }
            Op::FocalLoss { logits, targets, weights, alpha, gamma } => {
                let gscalar = *g.iter().next().unwrap();
                let z = self.value(*logits);
                let mut gx = Arr::zeros(z.raw_dim());
                for (((gi, &zi), &yi), &wi) in
                    gx.iter_mut().zip(z.iter()).zip(targets.iter()).zip(weights.iter())
                {
                    if wi == 0.0 {
                        continue;
                    }
                    let p = stable_sigmoid(zi);
                    let d = if yi > 0.5 {
                        // d/dz [ -α (1-p)^γ ln p ] = α (1-p)^γ (γ p ln p − (1−p))
                        *alpha * (1.0 - p).powf(*gamma) * (*gamma * p * log_sigmoid(zi) - (1.0 - p))
                    } else {
                        (1.0 - *alpha) * p.powf(*gamma) * (p - *gamma * (1.0 - p) * log_sigmoid(-zi))
                    };
                    *gi = gscalar * wi * d;
                }
                self.accum(grads, *logits, gx);
            }
            Op::SmoothL1 { pred, target, weights, beta } => {
                let gscalar = *g.iter().next().unwrap();
                let p = self.value(*pred);
                let mut gx = Arr::zeros(p.raw_dim());
                for (((gi, &pi), &ti), &wi) in
                    gx.iter_mut().zip(p.iter()).zip(target.iter()).zip(weights.iter())
                {
                    if wi == 0.0 {
                        continue;
                    }
                    let d = pi - ti;
                    let dd = if d.abs() < *beta { d / *beta } else { d.signum() };
                    *gi = gscalar * wi * dd;
                }
                self.accum(grads, *pred, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    /// Check analytic input gradients of `build` against central differences.
    fn fd_check(shapes: &[&[usize]], seed: u64, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Arr> = shapes.iter().map(|s| rand_arr(&mut rng, s)).collect();

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.input(a.clone())).collect();
        let loss = build(&mut tape, &vars);
        assert_eq!(tape.value(loss).len(), 1, "fd_check builder must output a scalar");
        let grads = tape.backward(loss);

        let eps = 1e-5;
        for (i, base) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[i]).expect("missing gradient").clone();
            let n = base.len();
            let probe: Vec<usize> = if n <= 8 {
                (0..n).collect()
            } else {
                (0..8).map(|_| rng.gen_range(0..n)).collect()
            };
            for &j in &probe {
                let eval = |delta: f64| -> f64 {
                    let mut xs = inputs.clone();
                    xs[i].as_slice_mut().unwrap()[j] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = xs.iter().map(|a| t.input(a.clone())).collect();
                    let l = build(&mut t, &vs);
                    *t.value(l).iter().next().unwrap()
                };
                let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let ana = analytic.as_slice().unwrap()[j];
                let rel = (ana - num).abs() / (ana.abs() + num.abs()).max(1e-8);
                assert!(
                    rel < 1e-4,
                    "input {i} coord {j}: analytic {ana} vs numeric {num} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn grad_add_mul_broadcast() {
        fd_check(&[&[3, 4], &[4]], 1, |t, v| {
            let s = t.add(v[0], v[1]);
            let m = t.mul(s, v[0]);
            t.sum_all(m)
        });
    }

    #[test]
    fn grad_matmul_chain() {
        fd_check(&[&[3, 4], &[4, 5], &[5]], 2, |t, v| {
            let y = t.matmul(v[0], v[1]);
            let y = t.add(y, v[2]);
            let y = t.relu(y);
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_head_matmul() {
        fd_check(&[&[5, 2, 3], &[2, 3, 3]], 3, |t, v| {
            let y = t.head_matmul(v[0], v[1]);
            let y = t.gelu(y);
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_softmax() {
        fd_check(&[&[4, 6]], 4, |t, v| {
            let y = t.softmax_last(v[0]);
            let w = t.mul(y, v[0]);
            t.sum_all(w)
        });
    }

    #[test]
    fn grad_layer_norm() {
        fd_check(&[&[5, 6], &[6], &[6]], 5, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            let y = t.mul(y, y);
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_attention() {
        fd_check(&[&[2, 3, 4], &[2, 5, 4], &[2, 5, 4]], 6, |t, v| {
            let y = t.attention(v[0], v[1], v[2], 0.5);
            let w = t.mul(y, y);
            t.sum_all(w)
        });
    }

    #[test]
    fn grad_structural_ops() {
        fd_check(&[&[2, 4, 6], &[2, 4, 6]], 7, |t, v| {
            let c = t.concat(&[v[0], v[1]], 2);
            let p = t.permute(c, &[2, 0, 1]);
            let r = t.reshape(p, &[12, 8]);
            let s = t.slice(r, 0, 2, 7);
            let q = t.mul(s, s);
            let m = t.sum_axis(q, 1);
            t.sum_all(m)
        });
    }

    #[test]
    fn grad_conv2d() {
        fd_check(&[&[2, 6, 6], &[3, 2, 3, 3], &[3]], 8, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1);
            let y = t.relu(y);
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_conv2d_stride1() {
        fd_check(&[&[2, 5, 5], &[2, 2, 3, 3]], 9, |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 1);
            let w = t.mul(y, y);
            t.sum_all(w)
        });
    }

    #[test]
    fn grad_masked_max_pool() {
        // Offsets keep values distinct so argmax ties can't blur the FD check.
        fd_check(&[&[3, 4, 2]], 10, |t, v| {
            let off = Arr::from_shape_fn(IxDyn(&[3, 4, 2]), |ix| {
                (ix[0] as f64 * 8.0 + ix[1] as f64 * 2.0 + ix[2] as f64) * 0.01
            });
            let o = t.constant(off);
            let x = t.add(v[0], o);
            let y = t.masked_max_pool(x, &[4, 2, 0]);
            let w = t.mul(y, y);
            t.sum_all(w)
        });
    }

    #[test]
    fn grad_scatter() {
        fd_check(&[&[3, 2]], 11, |t, v| {
            let y = t.scatter_pillars(v[0], &[(0, 1), (2, 0), (1, 1)], 3, 2);
            let w = t.mul(y, y);
            t.sum_all(w)
        });
    }

    #[test]
    fn grad_focal_loss() {
        let targets = Arr::from_shape_vec(IxDyn(&[6]), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let weights = Arr::from_shape_vec(IxDyn(&[6]), vec![1.0, 0.5, 2.0, 1.0, 0.0, 1.0]).unwrap();
        fd_check(&[&[6]], 12, move |t, v| {
            t.focal_loss_sum(v[0], targets.clone(), weights.clone(), 0.25, 2.0)
        });
    }

    #[test]
    fn grad_smooth_l1() {
        let target = Arr::from_shape_vec(IxDyn(&[5]), vec![0.3, -0.5, 2.0, 0.0, -1.4]).unwrap();
        let weights = Arr::from_shape_vec(IxDyn(&[5]), vec![1.0, 1.0, 0.5, 0.0, 2.0]).unwrap();
        fd_check(&[&[5]], 13, move |t, v| {
            t.smooth_l1_sum(v[0], target.clone(), weights.clone(), 1.0)
        });
    }

    #[test]
    fn smooth_l1_value_at_kink() {
        let mut t = Tape::new();
        let pred = t.constant(Arr::from_elem(IxDyn(&[1]), 1.0));
        let target = Arr::zeros(IxDyn(&[1]));
        let w = Arr::ones(IxDyn(&[1]));
        let l = t.smooth_l1_sum(pred, target, w, 1.0);
        assert!((t.value(l).iter().next().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut t = Tape::new();
        let x = t.constant(rand_arr(&mut rng, &[7, 9]));
        let y = t.softmax_last(x);
        for row in t.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_probs_exposed_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let mut t = Tape::new();
        let q = t.constant(rand_arr(&mut rng, &[3, 4, 5]));
        let k = t.constant(rand_arr(&mut rng, &[3, 6, 5]));
        let v = t.constant(rand_arr(&mut rng, &[3, 6, 5]));
        let out = t.attention(q, k, v, 1.0 / (5.0f64).sqrt());
        let probs = t.attention_probs(out).unwrap();
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn param_leaves_deduplicate() {
        let mut t = Tape::new();
        let w = Arr::ones(IxDyn(&[2, 2]));
        let a = t.param(7, &w);
        let b = t.param(7, &w);
        assert_eq!(a, b);
    }

    #[test]
    fn shared_param_accumulates_gradient() {
        // loss = sum(w x1) + sum(w x2): dL/dw = x1ᵀ-ish + x2ᵀ-ish contributions
        let mut t = Tape::new();
        let w = Arr::ones(IxDyn(&[2, 2]));
        let wv = t.param(0, &w);
        let x1 = t.constant(Arr::from_elem(IxDyn(&[2, 2]), 2.0));
        let x2 = t.constant(Arr::from_elem(IxDyn(&[2, 2]), 3.0));
        let y1 = t.matmul(wv, x1);
        let y2 = t.matmul(wv, x2);
        let s1 = t.sum_all(y1);
        let s2 = t.sum_all(y2);
        let l = t.add(s1, s2);
        let g = t.backward(l);
        let gw = g.param(0).unwrap();
        for &v in gw.iter() {
            assert!((v - 10.0).abs() < 1e-12); // 2*2 + 2*3
        }
    }
}
