//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Each operation appends a node holding its output value plus whatever the
//! backward pass needs. Nodes are stored in creation order, which is a
//! topological order by construction, so the backward pass is a single
//! reverse sweep.

use std::collections::BTreeMap;

use rand::Rng as _;

use super::gemm::{gemm, Mat};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Padding mode for 1-D convolution along the time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output length equals input length, kernel centered (odd kernels).
    Same,
    /// Left padding only: output at `t` sees inputs at `<= t`.
    Causal,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Add(Var, Var),
    AddTrailing(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    SoftmaxLast(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv1d { x: Var, w: Var, dilation: usize, padding: Padding },
    WeightNorm { v: Var, g: Var, norms: Vec<f64> },
    MaxTime { x: Var, argmax: Vec<usize> },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    ConcatLast(Vec<Var>),
    SliceLast { x: Var, start: usize },
    SelectStep { x: Var, t: usize },
    StackSteps(Vec<Var>),
    Reshape(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    Mean(Var),
    BceLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Single-threaded; build, run backward, drop.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Grads {
    leaves: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Tensor>,
}

impl Grads {
    /// Gradient with respect to a leaf created by [`Tape::variable`] or [`Tape::param`].
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        let g = self.leaves.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    /// Gradients of every trainable parameter recorded on the tape.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    t.shape().last().copied().ok_or_else(|| Error::shape(op, "expected at least 1-D input"))
}

fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(Error::shape(op, format!("expected 3-D input, got {s:?}"))),
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row offset of tap `j` for a kernel of width `k`.
fn tap_offset(j: usize, k: usize, dilation: usize, padding: Padding) -> isize {
    match padding {
        Padding::Same => (j as isize - (k / 2) as isize) * dilation as isize,
        Padding::Causal => -(((k - 1 - j) * dilation) as isize),
    }
}

/// Output rows `[lo, hi)` whose shifted input row is in range.
fn tap_range(t_len: usize, off: isize) -> Option<(usize, usize)> {
    let lo = (-off).max(0) as usize;
    let hi = (t_len as isize - off).min(t_len as isize);
    if hi <= lo as isize {
        None
    } else {
        Some((lo, hi as usize))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node { value, op: kind, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is tracked and retrievable via [`Grads::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Named parameter. Frozen parameters behave as constants.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        self.nodes.push(Node { value: t.clone(), op: Op::Param(name.to_string()), needs_grad: trainable });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add(a, b), ng)
    }

    /// `a + b` where `b`'s shape equals the trailing dims of `a` (bias, positional table).
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_trailing", format!("{sa:?} vs {sb:?}")));
        }
        let nb = vb.numel();
        let mut data = va.data().to_vec();
        if nb > 0 {
            for chunk in data.chunks_mut(nb) {
                for (x, y) in chunk.iter_mut().zip(vb.data()) {
                    *x += y;
                }
            }
        }
        let out = Tensor::new(sa.to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("add_trailing", out, Op::AddTrailing(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("sub", out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push("scale", out, Op::Scale(a, c), ng)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(name, out, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// `x @ w` for `x: [.., k]`, `w: [k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let k = last_dim("matmul", vx)?;
        let (wk, n) = match *vw.shape() {
            [a, b] => (a, b),
            ref s => return Err(Error::shape("matmul", format!("weight must be 2-D, got {s:?}"))),
        };
        if wk != k {
            return Err(Error::shape("matmul", format!("{:?} @ {:?}", vx.shape(), vw.shape())));
        }
        let rows = if k == 0 { vx.shape()[..vx.ndim() - 1].iter().product() } else { vx.numel() / k };
        let mut data = vec![0.0; rows * n];
        gemm(Mat::new(vx.data(), rows, k), Mat::new(vw.data(), k, n), &mut data, 0.0);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(x) || self.needs(w);
        self.push("matmul", out, Op::MatMul(x, w), ng)
    }

    /// Batched matrix product: `a: [B, m, k]`, `b: [B, k, n]` (or `[B, n, k]` with `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ba, m, k) = dims3("bmm", va)?;
        let (bb, r1, r2) = dims3("bmm", vb)?;
        let (kb, n) = if trans_b { (r2, r1) } else { (r1, r2) };
        if ba != bb || k != kb {
            return Err(Error::shape("bmm", format!("{:?} x {:?} (trans_b={trans_b})", va.shape(), vb.shape())));
        }
        let mut data = vec![0.0; ba * m * n];
        for i in 0..ba {
            let am = Mat::new(&va.data()[i * m * k..(i + 1) * m * k], m, k);
            let braw = &vb.data()[i * k * n..(i + 1) * k * n];
            let bm = if trans_b { Mat::new(braw, n, k).t() } else { Mat::new(braw, k, n) };
            gemm(am, bm, &mut data[i * m * n..(i + 1) * m * n], 0.0);
        }
        let out = Tensor::new(vec![ba, m, n], data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("bmm", out, Op::Bmm { a, b, trans_b }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let d = last_dim("softmax_last", va)?;
        let mut data = va.data().to_vec();
        if d > 0 {
            for row in data.chunks_mut(d) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push("softmax_last", out, Op::SoftmaxLast(a), ng)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of that width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = last_dim("layer_norm", vx)?;
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::shape("layer_norm", format!("x {:?}, gamma {:?}, beta {:?}", vx.shape(), vg.shape(), vb.shape())));
        }
        let rows = if d == 0 { 0 } else { vx.numel() / d };
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                data[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push("layer_norm", out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// 1-D convolution over time: `x: [B, T, Cin]`, `w: [K, Cin, Cout]` -> `[B, T, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize, padding: Padding) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (b, t, cin) = dims3("conv1d", vx)?;
        let (k, wcin, cout) = dims3("conv1d", vw)?;
        if wcin != cin || k == 0 || dilation == 0 {
            return Err(Error::shape("conv1d", format!("x {:?}, w {:?}, dilation {dilation}", vx.shape(), vw.shape())));
        }
        let mut data = vec![0.0; b * t * cout];
        for j in 0..k {
            let off = tap_offset(j, k, dilation, padding);
            let Some((lo, hi)) = tap_range(t, off) else { continue };
            let rows = hi - lo;
            let wj = Mat::new(&vw.data()[j * cin * cout..(j + 1) * cin * cout], cin, cout);
            for bi in 0..b {
                let src = (bi * t) as isize + lo as isize + off;
                let xs = &vx.data()[src as usize * cin..(src as usize + rows) * cin];
                let dst = &mut data[(bi * t + lo) * cout..(bi * t + hi) * cout];
                gemm(Mat::new(xs, rows, cin), wj, dst, 1.0);
            }
        }
        let out = Tensor::new(vec![b, t, cout], data)?;
        let ng = self.needs(x) || self.needs(w);
        self.push("conv1d", out, Op::Conv1d { x, w, dilation, padding }, ng)
    }

    /// Weight normalization `w[.., o] = g[o] * v[.., o] / ||v[.., o]||` over the last axis.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let (vv, vg) = (self.value(v), self.value(g));
        let cout = last_dim("weight_norm", vv)?;
        if vg.shape() != [cout] {
            return Err(Error::shape("weight_norm", format!("v {:?}, g {:?}", vv.shape(), vg.shape())));
        }
        let rows = if cout == 0 { 0 } else { vv.numel() / cout };
        let mut norms = vec![0.0; cout];
        for r in 0..rows {
            for o in 0..cout {
                norms[o] += vv.data()[r * cout + o].powi(2);
            }
        }
        for n in &mut norms {
            *n = n.sqrt();
            if *n == 0.0 {
                return Err(Error::NonFinite { op: "weight_norm" });
            }
        }
        let mut data = vec![0.0; vv.numel()];
        for r in 0..rows {
            for o in 0..cout {
                data[r * cout + o] = vg.data()[o] * vv.data()[r * cout + o] / norms[o];
            }
        }
        let out = Tensor::new(vv.shape().to_vec(), data)?;
        let ng = self.needs(v) || self.needs(g);
        self.push("weight_norm", out, Op::WeightNorm { v, g, norms }, ng)
    }

    /// Max over the time axis of `[B, T, C]`; ties go to the earliest step.
    pub fn max_time(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (b, t, c) = dims3("max_time", vx)?;
        if t == 0 {
            return Err(Error::shape("max_time", "empty time axis"));
        }
        let mut data = vec![f64::NEG_INFINITY; b * c];
        let mut argmax = vec![0usize; b * c];
        for bi in 0..b {
            for ti in 0..t {
                let row = &vx.data()[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                for ci in 0..c {
                    if row[ci] > data[bi * c + ci] {
                        data[bi * c + ci] = row[ci];
                        argmax[bi * c + ci] = ti;
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, c], data)?;
        let ng = self.needs(x);
        self.push("max_time", out, Op::MaxTime { x, argmax }, ng)
    }

    /// `[B, T, M]` -> `[B*h, T, M/h]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let (b, t, m) = dims3("split_heads", vx)?;
        if heads == 0 || m % heads != 0 {
            return Err(Error::shape("split_heads", format!("width {m} not divisible by {heads} heads")));
        }
        let d = m / heads;
        let mut data = vec![0.0; vx.numel()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let src = (bi * t + ti) * m + h * d;
                    let dst = ((bi * heads + h) * t + ti) * d;
                    data[dst..dst + d].copy_from_slice(&vx.data()[src..src + d]);
                }
            }
        }
        let out = Tensor::new(vec![b * heads, t, d], data)?;
        let ng = self.needs(x);
        self.push("split_heads", out, Op::SplitHeads { x, heads }, ng)
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let (bh, t, d) = dims3("merge_heads", vx)?;
        if heads == 0 || bh % heads != 0 {
            return Err(Error::shape("merge_heads", format!("batch {bh} not divisible by {heads} heads")));
        }
        let b = bh / heads;
        let m = d * heads;
        let mut data = vec![0.0; vx.numel()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let dst = (bi * t + ti) * m + h * d;
                    let src = ((bi * heads + h) * t + ti) * d;
                    data[dst..dst + d].copy_from_slice(&vx.data()[src..src + d]);
                }
            }
        }
        let out = Tensor::new(vec![b, t, m], data)?;
        let ng = self.needs(x);
        self.push("merge_heads", out, Op::MergeHeads { x, heads }, ng)
    }

    /// Concatenate along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat_last", "no inputs"))?;
        let lead = self.value(*first).shape()[..self.value(*first).ndim().saturating_sub(1)].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for v in xs {
            let t = self.value(*v);
            if t.ndim() != lead.len() + 1 || t.shape()[..lead.len()] != *lead {
                return Err(Error::shape("concat_last", format!("{:?} vs leading {lead:?}", t.shape())));
            }
            widths.push(*t.shape().last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut col = 0;
        for (v, w) in xs.iter().zip(&widths) {
            let src = self.value(*v).data();
            for r in 0..rows {
                data[r * total + col..r * total + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        let ng = xs.iter().any(|v| self.needs(*v));
        self.push("concat_last", out, Op::ConcatLast(xs.to_vec()), ng)
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let w = last_dim("slice_last", vx)?;
        if start + len > w {
            return Err(Error::shape("slice_last", format!("[{start}, {}) out of width {w}", start + len)));
        }
        let rows = if w == 0 { 0 } else { vx.numel() / w };
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(x);
        self.push("slice_last", out, Op::SliceLast { x, start }, ng)
    }

    /// Time step `t` of `[B, T, C]` as `[B, C]`.
    pub fn select_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let vx = self.value(x);
        let (b, tl, c) = dims3("select_step", vx)?;
        if t >= tl {
            return Err(Error::shape("select_step", format!("step {t} of {tl}")));
        }
        let mut data = Vec::with_capacity(b * c);
        for bi in 0..b {
            data.extend_from_slice(&vx.data()[(bi * tl + t) * c..(bi * tl + t + 1) * c]);
        }
        let out = Tensor::new(vec![b, c], data)?;
        let ng = self.needs(x);
        self.push("select_step", out, Op::SelectStep { x, t }, ng)
    }

    /// Stack `T` tensors of shape `[B, C]` into `[B, T, C]`.
    pub fn stack_steps(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("stack_steps", "no inputs"))?;
        let (b, c) = match *self.value(*first).shape() {
            [b, c] => (b, c),
            ref s => return Err(Error::shape("stack_steps", format!("expected [B, C], got {s:?}"))),
        };
        let t = xs.len();
        let mut data = vec![0.0; b * t * c];
        for (ti, v) in xs.iter().enumerate() {
            let val = self.value(*v);
            if val.shape() != [b, c] {
                return Err(Error::shape("stack_steps", format!("{:?} vs [{b}, {c}]", val.shape())));
            }
            for bi in 0..b {
                data[(bi * t + ti) * c..(bi * t + ti + 1) * c].copy_from_slice(&val.data()[bi * c..(bi + 1) * c]);
            }
        }
        let out = Tensor::new(vec![b, t, c], data)?;
        let ng = xs.iter().any(|v| self.needs(*v));
        self.push("stack_steps", out, Op::StackSteps(xs.to_vec()), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        self.push("reshape", out.with_grad(false), Op::Reshape(x), ng)
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let vx = self.value(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..vx.numel()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let data = vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.needs(x);
        self.push("dropout", out, Op::Dropout { x, mask }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let ng = self.needs(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Sigmoid cross-entropy with logits, summed over the last axis and
    /// averaged over the leading rows. `targets` has the same shape as `logits`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let vz = self.value(logits);
        same_shape("bce_with_logits", vz, targets)?;
        let c = last_dim("bce_with_logits", vz)?;
        let rows = if c == 0 { 0 } else { vz.numel() / c };
        if rows == 0 {
            return Err(Error::shape("bce_with_logits", "empty batch"));
        }
        let total: f64 = vz
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let ng = self.needs(logits);
        self.push(
            "bce_with_logits",
            Tensor::scalar(total / rows as f64),
            Op::BceLogits { logits, targets: targets.data().to_vec() },
            ng,
        )
    }

    /// Gradients of the scalar `loss` with respect to every tracked leaf.
    ///
    /// Trainable parameters that do not influence the loss get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }

        let mut params = BTreeMap::new();
        let mut leaves = Vec::with_capacity(self.nodes.len());
        let mut shapes = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            shapes.push(node.value.shape().to_vec());
            match &node.op {
                Op::Param(name) if node.needs_grad => {
                    let g = grads[i].clone().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    params
                        .entry(name.clone())
                        .and_modify(|acc: &mut Tensor| {
                            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += b;
                            }
                        })
                        .or_insert(t);
                    leaves.push(grads[i].take());
                }
                Op::Leaf if node.needs_grad => {
                    leaves.push(Some(grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()])));
                }
                _ => leaves.push(None),
            }
        }
        for (name, g) in &params {
            if !g.is_finite() {
                return Err(Error::Invalid(format!("non-finite gradient for `{name}`")));
            }
        }
        Ok(Grads { leaves, shapes, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::AddTrailing(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let nb = gb.len();
                    if nb > 0 {
                        for chunk in g.chunks(nb) {
                            gb.iter_mut().zip(chunk).for_each(|(x, d)| *x += d);
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += c * d);
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        if y[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::MatMul(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (k, n) = (vw.shape()[0], vw.shape()[1]);
                let rows = if n == 0 { 0 } else { g.len() / n };
                if let Some(gx) = self.acc(grads, *x) {
                    gemm(Mat::new(g, rows, n), Mat::new(vw.data(), k, n).t(), gx, 1.0);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gemm(Mat::new(vx.data(), rows, k).t(), Mat::new(g, rows, n), gw, 1.0);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bn, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = node.value.shape()[2];
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..bn {
                        let gi = Mat::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let braw = &vb.data()[i * k * n..(i + 1) * k * n];
                        // d a = g @ B^T, where B is the k x n right operand.
                        let bt = if *trans_b { Mat::new(braw, n, k) } else { Mat::new(braw, k, n).t() };
                        gemm(gi, bt, &mut ga[i * m * k..(i + 1) * m * k], 1.0);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..bn {
                        let gi = Mat::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let ai = Mat::new(&va.data()[i * m * k..(i + 1) * m * k], m, k);
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(gi.t(), ai, dst, 1.0);
                        } else {
                            gemm(ai.t(), gi, dst, 1.0);
                        }
                    }
                }
            }
            Op::SoftmaxLast(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let d = *node.value.shape().last().unwrap();
                    if d > 0 {
                        for r in 0..y.len() / d {
                            let yr = &y[r * d..(r + 1) * d];
                            let gr = &g[r * d..(r + 1) * d];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                ga[r * d + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *node.value.shape().last().unwrap();
                let vg = self.value(*gamma).data();
                if let Some(ggam) = self.acc(grads, *gamma) {
                    for r in 0..inv_std.len() {
                        for j in 0..d {
                            ggam[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gbeta) = self.acc(grads, *beta) {
                    for r in 0..inv_std.len() {
                        for j in 0..d {
                            gbeta[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let df = d as f64;
                    let mut dxhat = vec![0.0; d];
                    for r in 0..inv_std.len() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * vg[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[r * d + j];
                        }
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] / df * (df * dxhat[j] - s1 - xhat[r * d + j] * s2);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, dilation, padding } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (b, t, cin) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (k, cout) = (vw.shape()[0], vw.shape()[2]);
                let mut gx = self.acc(grads, *x).map(std::mem::take);
                let mut gw = self.acc(grads, *w).map(std::mem::take);
                for j in 0..k {
                    let off = tap_offset(j, k, *dilation, *padding);
                    let Some((lo, hi)) = tap_range(t, off) else { continue };
                    let rows = hi - lo;
                    let wj = &vw.data()[j * cin * cout..(j + 1) * cin * cout];
                    for bi in 0..b {
                        let src = ((bi * t) as isize + lo as isize + off) as usize;
                        let gblk = Mat::new(&g[(bi * t + lo) * cout..(bi * t + hi) * cout], rows, cout);
                        if let Some(gx) = gx.as_mut() {
                            gemm(gblk, Mat::new(wj, cin, cout).t(), &mut gx[src * cin..(src + rows) * cin], 1.0);
                        }
                        if let Some(gw) = gw.as_mut() {
                            let xs = Mat::new(&vx.data()[src * cin..(src + rows) * cin], rows, cin);
                            gemm(xs.t(), gblk, &mut gw[j * cin * cout..(j + 1) * cin * cout], 1.0);
                        }
                    }
                }
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w.0] = Some(v);
                }
            }
            Op::WeightNorm { v, g: gv, norms } => {
                let (vv, vgain) = (self.value(*v).data(), self.value(*gv).data());
                let cout = norms.len();
                let rows = if cout == 0 { 0 } else { vv.len() / cout };
                // proj[o] = sum_r g_out[r, o] * v[r, o] / ||v_o||
                let mut proj = vec![0.0; cout];
                for r in 0..rows {
                    for o in 0..cout {
                        proj[o] += g[r * cout + o] * vv[r * cout + o] / norms[o];
                    }
                }
                if let Some(gg) = self.acc(grads, *gv) {
                    for o in 0..cout {
                        gg[o] += proj[o];
                    }
                }
                if let Some(gvv) = self.acc(grads, *v) {
                    for r in 0..rows {
                        for o in 0..cout {
                            let u = vv[r * cout + o] / norms[o];
                            gvv[r * cout + o] += vgain[o] / norms[o] * (g[r * cout + o] - u * proj[o]);
                        }
                    }
                }
            }
            Op::MaxTime { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let s = self.value(*x).shape();
                    let (t, c) = (s[1], s[2]);
                    for (idx, &ti) in argmax.iter().enumerate() {
                        let (bi, ci) = (idx / c, idx % c);
                        gx[(bi * t + ti) * c + ci] += g[idx];
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let s = self.value(*x).shape();
                    let (b, t, m) = (s[0], s[1], s[2]);
                    let d = m / heads;
                    for bi in 0..b {
                        for h in 0..*heads {
                            for ti in 0..t {
                                let dst = (bi * t + ti) * m + h * d;
                                let src = ((bi * heads + h) * t + ti) * d;
                                for i in 0..d {
                                    gx[dst + i] += g[src + i];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let s = self.value(*x).shape();
                    let (bh, t, d) = (s[0], s[1], s[2]);
                    let m = d * heads;
                    for bi in 0..bh / heads {
                        for h in 0..*heads {
                            for ti in 0..t {
                                let src = (bi * t + ti) * m + h * d;
                                let dst = ((bi * heads + h) * t + ti) * d;
                                for i in 0..d {
                                    gx[dst + i] += g[src + i];
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatLast(xs) => {
                let total = *node.value.shape().last().unwrap();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut col = 0;
                for v in xs {
                    let w = *self.value(*v).shape().last().unwrap();
                    if let Some(gv) = self.acc(grads, *v) {
                        for r in 0..rows {
                            for j in 0..w {
                                gv[r * w + j] += g[r * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::SliceLast { x, start } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let w = *self.value(*x).shape().last().unwrap();
                    let len = *node.value.shape().last().unwrap();
                    let rows = if len == 0 { 0 } else { g.len() / len };
                    for r in 0..rows {
                        for j in 0..len {
                            gx[r * w + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::SelectStep { x, t } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let s = self.value(*x).shape();
                    let (b, tl, c) = (s[0], s[1], s[2]);
                    for bi in 0..b {
                        for ci in 0..c {
                            gx[(bi * tl + t) * c + ci] += g[bi * c + ci];
                        }
                    }
                }
            }
            Op::StackSteps(xs) => {
                let s = node.value.shape();
                let (b, t, c) = (s[0], s[1], s[2]);
                for (ti, v) in xs.iter().enumerate() {
                    if let Some(gv) = self.acc(grads, *v) {
                        for bi in 0..b {
                            for ci in 0..c {
                                gv[bi * c + ci] += g[(bi * t + ti) * c + ci];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, d)| *a += d);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = gx.len() as f64;
                    gx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            Op::BceLogits { logits, targets } => {
                if let Some(gz) = self.acc(grads, *logits) {
                    let z = self.value(*logits);
                    let c = *z.shape().last().unwrap();
                    let rows = (z.numel() / c) as f64;
                    for i in 0..gz.len() {
                        gz[i] += g[0] * (sigmoid(z.data()[i]) - targets[i]) / rows;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::named_rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_has_derivative_two_x() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sigmoid_sum_at_zero() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[4]));
        let s = tape.sigmoid(x).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn disconnected_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::ones(&[3]), true);
        let _b = tape.param("b", &Tensor::ones(&[2]), true);
        let frozen = tape.param("c", &Tensor::ones(&[3]), false);
        let p = tape.mul(a, frozen).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.params()["a"].data(), &[1.0; 3]);
        assert_eq!(g.params()["b"].data(), &[0.0; 2]);
        assert!(!g.params().contains_key("c"));
    }

    #[test]
    fn sum_backward_is_ones_and_reshape_is_identity() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::randn(&[2, 3], &mut named_rng(1, "t")));
        let r = tape.reshape(x, &[3, 2]).unwrap();
        let l = tape.sum(r).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn max_time_ties_go_to_earliest() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[1, 3, 1], &[2.0, 2.0, 1.0]));
        let m = tape.max_time(x).unwrap();
        let l = tape.sum(m).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[2, 3, 8], &mut named_rng(2, "t")));
        let s = tape.split_heads(x, 4).unwrap();
        assert_eq!(tape.shape(s), &[8, 3, 2]);
        let m = tape.merge_heads(s, 4).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
    }

    #[test]
    fn causal_conv_only_looks_back() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4, 1], &[1.0, 0.0, 0.0, 0.0]));
        let w = tape.constant(t(&[2, 1, 1], &[1.0, 1.0]));
        let y = tape.conv1d(x, w, 1, Padding::Causal).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 0.0, 0.0]);
        let y2 = tape.conv1d(x, w, 2, Padding::Causal).unwrap();
        assert_eq!(tape.value(y2).data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_target() {
        let mut tape = Tape::new();
        let z = tape.variable(t(&[1, 3], &[-1.0, 0.0, 2.0]));
        let y = t(&[1, 3], &[0.0, 1.0, 1.0]);
        let l = tape.bce_with_logits(z, &y).unwrap();
        let g = tape.backward(l).unwrap().wrt(z).unwrap();
        for (i, (&zz, &yy)) in [-1.0, 0.0, 2.0].iter().zip(y.data()).enumerate() {
            assert!((g.data()[i] - (sigmoid(zz) - yy)).abs() < 1e-15);
        }
    }

    #[test]
    fn overflow_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2], 1e200));
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite { .. })));
    }
}
