//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every primitive appends a node to the tape. Node ids are assigned in
//! execution order, so walking ids downward from the root visits the graph
//! in reverse topological order.

use std::cell::RefCell;

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    LogAddExp(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Sqrt(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Conv2d { x: Var, kernel: Var },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    PairwiseJsd { p: Var, q: Var, log_mix: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Record of executed primitives. Single-threaded; each client owns its own.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        if i + s.len() >= rank {
            s[i + s.len() - rank]
        } else {
            1
        }
    };
    (0..rank)
        .map(|i| {
            let (da, db) = (dim(a, i), dim(b, i));
            if da == db || db == 1 {
                Ok(da)
            } else if da == 1 {
                Ok(db)
            } else {
                Err(Error::shape(op, a, b))
            }
        })
        .collect()
}

/// Strides of `shape` right-aligned into `out`, zero on broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut step = 1;
    for i in (0..shape.len()).rev() {
        strides[i + off] = if shape[i] == 1 { 0 } else { step };
        step *= shape[i];
    }
    strides
}

/// Visits every output element in row-major order with the matching flat
/// offsets into both (broadcast) operands.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel(out) {
        f(o, ia, ib);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn softmax_raw(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..len).map(|k| (x[at(k)] - max).exp()).sum();
            let lse = max + total.ln();
            for k in 0..len {
                out[at(k)] = if log {
                    x[at(k)] - lse
                } else {
                    (x[at(k)] - max).exp() / total
                };
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().nodes[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.inner.borrow().nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`]. Trainable nodes
    /// the root does not depend on report zeros; constants report `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &node.grad {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.consumed = false;
        for node in &mut inner.nodes {
            node.grad = None;
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(inner.nodes.len() - 1)
    }

    fn any_rg(&self, vars: &[Var]) -> bool {
        let inner = self.inner.borrow();
        vars.iter().any(|v| inner.nodes[v.0].requires_grad)
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.with_value(x, |t| t.map(f));
        let rg = self.any_rg(&[x]);
        self.push(value, op, rg)
    }

    fn broadcast_binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let (ta, tb) = (&inner.nodes[a.0].value, &inner.nodes[b.0].value);
            if ta.shape() == tb.shape() {
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(ta.shape().to_vec(), data)
            } else {
                let out = broadcast_shape(name, ta.shape(), tb.shape())?;
                let sa = aligned_strides(ta.shape(), &out);
                let sb = aligned_strides(tb.shape(), &out);
                let mut data = vec![0.0; numel(&out)];
                let (da, db) = (ta.data(), tb.data());
                for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
                Tensor::from_parts(out, data)
            }
        };
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        if self.with_value(b, |t| t.data().contains(&0.0)) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.broadcast_binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `ln(e^a + e^b)` with broadcasting, without overflow or underflow.
    pub fn log_add_exp(&self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("log_add_exp", a, b, log_add_exp_raw, Op::LogAddExp(a, b))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let (ta, tb) = (&inner.nodes[a.0].value, &inner.nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::shape("matmul", sa, sb));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            Tensor::from_parts(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))
        };
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let value = self.with_value(x, |t| {
            let s = t.shape();
            if s.len() != 2 {
                return Err(Error::shape("transpose", s, &[0, 0]));
            }
            Ok(Tensor::from_parts(vec![s[1], s[0]], transpose_raw(t.data(), s[0], s[1])))
        })?;
        let rg = self.any_rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        let rg = self.any_rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        if let Some(bad) = self.with_value(x, |t| t.data().iter().copied().find(|&v| v <= 0.0)) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid_raw, Op::Sigmoid(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        if let Some(bad) = self.with_value(x, |t| t.data().iter().copied().find(|&v| v < 0.0)) {
            return Err(Error::domain("sqrt", format!("negative input {bad}")));
        }
        Ok(self.unary(x, f64::sqrt, Op::Sqrt(x)))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "{op}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(shape)
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis("softmax", x, axis)?;
        let data = self.with_value(x, |t| softmax_raw(t.data(), &shape, axis, false));
        let rg = self.any_rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis("log_softmax", x, axis)?;
        let data = self.with_value(x, |t| softmax_raw(t.data(), &shape, axis, true));
        let rg = self.any_rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::LogSoftmax { x, axis }, rg))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.check_axis("concat", first, axis)?;
        let value = {
            let inner = self.inner.borrow();
            let mut total = 0;
            for p in parts {
                let s = inner.nodes[p.0].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", &base, s));
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let (outer, _, inner_len) = split_axis(&shape, axis);
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for p in parts {
                    let t = &inner.nodes[p.0].value;
                    let chunk = t.shape()[axis] * inner_len;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape, data)
        };
        let rg = self.any_rg(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.check_axis("slice", x, axis)?;
        if start >= end || end > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice: range {start}..{end} invalid for axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let data = self.with_value(x, |t| {
            let mut data = Vec::with_capacity(numel(&out_shape));
            for o in 0..outer {
                let base = o * len * inner;
                data.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
            }
            data
        });
        let rg = self.any_rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    fn reduce_axis(&self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.check_axis(if mean { "mean" } else { "sum" }, x, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.with_value(x, |t| {
            let d = t.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += d[o * len * inner + k * inner + i];
                    }
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= len as f64);
            }
            out
        });
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.any_rg(&[x]);
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.push(Tensor::from_parts(out_shape, data), op, rg))
    }

    /// Sums over `axis`, removing it.
    pub fn sum(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let s = self.with_value(x, |t| t.data().iter().sum());
        let rg = self.any_rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let s = self.with_value(x, |t| t.data().iter().sum::<f64>() / t.numel() as f64);
        let rg = self.any_rg(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Valid (unpadded) stride-1 cross-correlation.
    /// `x: [B, C, H, W]`, `kernel: [O, C, KH, KW]` -> `[B, O, H-KH+1, W-KW+1]`.
    pub fn conv2d(&self, x: Var, kernel: Var) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let (tx, tk) = (&inner.nodes[x.0].value, &inner.nodes[kernel.0].value);
            let (sx, sk) = (tx.shape(), tk.shape());
            if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || sx[2] < sk[2] || sx[3] < sk[3] {
                return Err(Error::shape("conv2d", sx, sk));
            }
            let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
            let (o, kh, kw) = (sk[0], sk[2], sk[3]);
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            let (xd, kd) = (tx.data(), tk.data());
            let mut out = vec![0.0; b * o * oh * ow];
            for bi in 0..b {
                for oi in 0..o {
                    let obase = (bi * o + oi) * oh * ow;
                    for ci in 0..c {
                        let xbase = (bi * c + ci) * h * w;
                        let kbase = (oi * c + ci) * kh * kw;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let kv = kd[kbase + ky * kw + kx];
                                for y in 0..oh {
                                    let xrow = xbase + (y + ky) * w + kx;
                                    let orow = obase + y * ow;
                                    for xx in 0..ow {
                                        out[orow + xx] += kv * xd[xrow + xx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Tensor::from_parts(vec![b, o, oh, ow], out)
        };
        let rg = self.any_rg(&[x, kernel]);
        Ok(self.push(value, Op::Conv2d { x, kernel }, rg))
    }

    /// 2x2 max pooling with stride 2 over `[B, C, H, W]`; trailing odd rows
    /// and columns are dropped.
    pub fn max_pool2d(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
            return Err(Error::shape("max_pool2d", &shape, &[2, 2]));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let (data, argmax) = self.with_value(x, |t| {
            let d = t.data();
            let mut out = Vec::with_capacity(b * c * oh * ow);
            let mut arg = Vec::with_capacity(b * c * oh * ow);
            for plane in 0..b * c {
                let base = plane * h * w;
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = base + 2 * y * w + 2 * xx;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let at = base + (2 * y + dy) * w + 2 * xx + dx;
                            if d[at] > d[best] {
                                best = at;
                            }
                        }
                        out.push(d[best]);
                        arg.push(best);
                    }
                }
            }
            (out, arg)
        });
        let rg = self.any_rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![b, c, oh, ow], data),
            Op::MaxPool2d { x, argmax },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, computed with
    /// log-sum-exp stabilization.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::domain(
                "cross_entropy",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        let (loss, probs) = self.with_value(logits, |t| {
            let probs = softmax_raw(t.data(), t.shape(), 1, false);
            let logp = softmax_raw(t.data(), t.shape(), 1, true);
            let total: f64 = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| -logp[i * classes + l])
                .sum();
            (total / labels.len() as f64, probs)
        });
        let rg = self.any_rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `sum_{j,k} 0.5 * (KL(P_j || M_jk) + KL(M_jk || Q_k))` over the rows of
    /// `p [Bp, d]` and `q [Bq, d]`, where `P = softmax(p)`, `Q = softmax(q)`
    /// row-wise and `M_jk = (P_j + Q_k) / 2`.
    pub fn pairwise_jsd(&self, p: Var, q: Var) -> Result<Var> {
        let (sp, sq) = (self.shape(p), self.shape(q));
        if sp.len() != 2 || sq.len() != 2 || sp[1] != sq[1] {
            return Err(Error::shape("pairwise_jsd", &sp, &sq));
        }
        let (bp, bq, d) = (sp[0], sq[0], sp[1]);
        let (pp, lp) = self.with_value(p, row_softmax_pair);
        let (qq, lq) = self.with_value(q, row_softmax_pair);
        let mut log_mix = vec![0.0; bp * bq * d];
        let mut total = 0.0;
        for j in 0..bp {
            for k in 0..bq {
                let base = (j * bq + k) * d;
                for i in 0..d {
                    let (a, b) = (pp[j * d + i], qq[k * d + i]);
                    let (la, lb) = (lp[j * d + i], lq[k * d + i]);
                    let m = 0.5 * (a + b);
                    let lm = if m > 0.0 {
                        m.ln()
                    } else {
                        log_add_exp_raw(la, lb) - std::f64::consts::LN_2
                    };
                    log_mix[base + i] = lm;
                    total += a * (la - lm) + m * (lm - lb);
                }
            }
        }
        let rg = self.any_rg(&[p, q]);
        Ok(self.push(Tensor::scalar(0.5 * total), Op::PairwiseJsd { p, q, log_mix }, rg))
    }

    /// Cosine similarity of two equal-length vectors, built from primitives.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sa != sb {
            return Err(Error::shape("cosine_similarity", &sa, &sb));
        }
        let zero_norm = |v: Var| self.with_value(v, |t| t.data().iter().all(|&x| x == 0.0));
        if zero_norm(a) || zero_norm(b) {
            return Err(Error::domain("cosine_similarity", "zero-norm input"));
        }
        let dot = self.sum_all(self.mul(a, b)?);
        let na = self.sqrt(self.sum_all(self.square(a)?))?;
        let nb = self.sqrt(self.sum_all(self.square(b)?))?;
        self.div(dot, self.mul(na, nb)?)
    }

    /// Propagates `d root / d node` to every trainable node.
    pub fn backward(&self, root: Var) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Backward(
                "backward already ran on this tape; call reset() first".into(),
            ));
        }
        if inner.nodes.is_empty() {
            return Err(Error::Backward("empty tape".into()));
        }
        let root_value = &inner.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        inner.consumed = true;
        for node in &mut inner.nodes {
            node.grad = None;
        }
        if !inner.nodes[root.0].requires_grad {
            return Ok(());
        }
        inner.nodes[root.0].grad = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = inner.nodes[id].grad.take() else {
                continue;
            };
            let contributions = vjp(&inner.nodes, id, &g)?;
            inner.nodes[id].grad = Some(g);
            for (input, gi) in contributions {
                let node = &mut inner.nodes[input];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(gi),
                }
            }
        }
        Ok(())
    }
}

/// Row-wise softmax and log-softmax of a 2-D tensor.
fn row_softmax_pair(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    (
        softmax_raw(t.data(), t.shape(), 1, false),
        softmax_raw(t.data(), t.shape(), 1, true),
    )
}

/// Pulls a gradient w.r.t. row-softmax outputs back to the logits.
fn softmax_vjp_rows(probs: &[f64], g: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for ((o, p), gr) in out.chunks_mut(d).zip(probs.chunks(d)).zip(g.chunks(d)) {
        let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
        for i in 0..d {
            o[i] = p[i] * (gr[i] - dot);
        }
    }
    out
}

fn sigmoid_raw(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn log_add_exp_raw(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Reduces a broadcast gradient back to the operand's own shape.
fn unbroadcast(
    g: &[f64],
    out: &[usize],
    operand: &[usize],
    other: &[usize],
    mul_by: impl Fn(usize, usize) -> f64,
) -> Vec<f64> {
    let mut acc = vec![0.0; numel(operand)];
    let so = aligned_strides(operand, out);
    let st = aligned_strides(other, out);
    for_each_broadcast(out, &so, &st, |o, io, it| acc[io] += g[o] * mul_by(io, it));
    acc
}

/// Vector-Jacobian products of node `id` for each input that needs a gradient.
fn vjp(nodes: &[Node], id: usize, g: &[f64]) -> Result<Vec<(usize, Vec<f64>)>> {
    let node = &nodes[id];
    let y = node.value.data();
    let rg = |v: &Var| nodes[v.0].requires_grad;
    let val = |v: &Var| &nodes[v.0].value;
    let mut out = Vec::new();

    let binary = |a: &Var, b: &Var, out: &mut Vec<(usize, Vec<f64>)>, da: &dyn Fn(f64, f64) -> f64, db: &dyn Fn(f64, f64) -> f64| {
        let (ta, tb) = (val(a), val(b));
        let (xa, xb) = (ta.data(), tb.data());
        let oshape = node.value.shape();
        if rg(a) {
            let gi = if ta.shape() == tb.shape() {
                g.iter().enumerate().map(|(i, &gv)| gv * da(xa[i], xb[i])).collect()
            } else {
                unbroadcast(g, oshape, ta.shape(), tb.shape(), |ia, ib| da(xa[ia], xb[ib]))
            };
            out.push((a.0, gi));
        }
        if rg(b) {
            let gi = if ta.shape() == tb.shape() {
                g.iter().enumerate().map(|(i, &gv)| gv * db(xa[i], xb[i])).collect()
            } else {
                unbroadcast(g, oshape, tb.shape(), ta.shape(), |ib, ia| db(xa[ia], xb[ib]))
            };
            out.push((b.0, gi));
        }
    };

    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => binary(a, b, &mut out, &|_, _| 1.0, &|_, _| 1.0),
        Op::Sub(a, b) => binary(a, b, &mut out, &|_, _| 1.0, &|_, _| -1.0),
        Op::Mul(a, b) => binary(a, b, &mut out, &|_, y| y, &|x, _| x),
        Op::Div(a, b) => binary(a, b, &mut out, &|_, y| 1.0 / y, &|x, y| -x / (y * y)),
        Op::LogAddExp(a, b) => binary(
            a,
            b,
            &mut out,
            &|x, y| sigmoid_raw(x - y),
            &|x, y| sigmoid_raw(y - x),
        ),
        Op::Scale(x, c) => out.push((x.0, g.iter().map(|v| v * c).collect())),
        Op::AddScalar(x) | Op::Reshape(x) => out.push((x.0, g.to_vec())),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if rg(a) {
                let bt = transpose_raw(tb.data(), k, n);
                out.push((a.0, matmul_raw(g, &bt, m, n, k)));
            }
            if rg(b) {
                let at = transpose_raw(ta.data(), m, k);
                out.push((b.0, matmul_raw(&at, g, k, m, n)));
            }
        }
        Op::Transpose(x) => {
            let s = val(x).shape();
            out.push((x.0, transpose_raw(g, s[1], s[0])));
        }
        Op::Exp(x) => out.push((x.0, g.iter().zip(y).map(|(g, y)| g * y).collect())),
        Op::Log(x) => {
            let xv = val(x).data();
            out.push((x.0, g.iter().zip(xv).map(|(g, x)| g / x).collect()));
        }
        Op::Tanh(x) => out.push((x.0, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect())),
        Op::Sigmoid(x) => out.push((x.0, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())),
        Op::Relu(x) => {
            let xv = val(x).data();
            out.push((x.0, g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()));
        }
        Op::Sqrt(x) => {
            if y.contains(&0.0) {
                return Err(Error::domain("sqrt", "gradient undefined at 0"));
            }
            out.push((x.0, g.iter().zip(y).map(|(g, y)| g / (2.0 * y)).collect()));
        }
        Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
            let log = matches!(node.op, Op::LogSoftmax { .. });
            let (outer, len, inner) = split_axis(node.value.shape(), *axis);
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    if log {
                        let gsum: f64 = (0..len).map(|k| g[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = g[at(k)] - y[at(k)].exp() * gsum;
                        }
                    } else {
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            }
            out.push((x.0, gx));
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            let widths: Vec<usize> = parts.iter().map(|p| val(p).shape()[*axis] * inner).collect();
            let row: usize = widths.iter().sum();
            for (p, &wdt) in parts.iter().zip(&widths) {
                if rg(p) {
                    let mut gp = Vec::with_capacity(outer * wdt);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * row + offset..o * row + offset + wdt]);
                    }
                    out.push((p.0, gp));
                }
                offset += wdt;
            }
        }
        Op::Slice { x, axis, start } => {
            let s = val(x).shape();
            let (outer, len, inner) = split_axis(s, *axis);
            let width = node.value.shape()[*axis] * inner;
            let mut gx = vec![0.0; numel(s)];
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                gx[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            out.push((x.0, gx));
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let s = val(x).shape();
            let (outer, len, inner) = split_axis(s, *axis);
            let factor = if matches!(node.op, Op::Mean { .. }) { 1.0 / len as f64 } else { 1.0 };
            let mut gx = vec![0.0; numel(s)];
            for o in 0..outer {
                for k in 0..len {
                    for i in 0..inner {
                        gx[o * len * inner + k * inner + i] = g[o * inner + i] * factor;
                    }
                }
            }
            out.push((x.0, gx));
        }
        Op::SumAll(x) => out.push((x.0, vec![g[0]; val(x).numel()])),
        Op::MeanAll(x) => {
            let n = val(x).numel();
            out.push((x.0, vec![g[0] / n as f64; n]));
        }
        Op::Conv2d { x, kernel } => {
            let (tx, tk) = (val(x), val(kernel));
            let (sx, sk) = (tx.shape(), tk.shape());
            let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
            let (o, kh, kw) = (sk[0], sk[2], sk[3]);
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            let (xd, kd) = (tx.data(), tk.data());
            let mut gx = rg(x).then(|| vec![0.0; xd.len()]);
            let mut gk = rg(kernel).then(|| vec![0.0; kd.len()]);
            for bi in 0..b {
                for oi in 0..o {
                    let obase = (bi * o + oi) * oh * ow;
                    for ci in 0..c {
                        let xbase = (bi * c + ci) * h * w;
                        let kbase = (oi * c + ci) * kh * kw;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let kat = kbase + ky * kw + kx;
                                let mut kacc = 0.0;
                                for yy in 0..oh {
                                    let xrow = xbase + (yy + ky) * w + kx;
                                    let orow = obase + yy * ow;
                                    for xx in 0..ow {
                                        let gv = g[orow + xx];
                                        kacc += gv * xd[xrow + xx];
                                        if let Some(gx) = gx.as_mut() {
                                            gx[xrow + xx] += gv * kd[kat];
                                        }
                                    }
                                }
                                if let Some(gk) = gk.as_mut() {
                                    gk[kat] += kacc;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(gx) = gx {
                out.push((x.0, gx));
            }
            if let Some(gk) = gk {
                out.push((kernel.0, gk));
            }
        }
        Op::MaxPool2d { x, argmax } => {
            let mut gx = vec![0.0; val(x).numel()];
            for (&at, &gv) in argmax.iter().zip(g) {
                gx[at] += gv;
            }
            out.push((x.0, gx));
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let classes = val(logits).shape()[1];
            let scale = g[0] / labels.len() as f64;
            let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (i, &l) in labels.iter().enumerate() {
                gx[i * classes + l] -= scale;
            }
            out.push((logits.0, gx));
        }
        Op::PairwiseJsd { p, q, log_mix } => {
            let (tp, tq) = (val(p), val(q));
            let (bp, bq, d) = (tp.shape()[0], tq.shape()[0], tp.shape()[1]);
            let (pp, lp) = row_softmax_pair(tp);
            let (qq, lq) = row_softmax_pair(tq);
            let scale = 0.5 * g[0];
            let mut gp = vec![0.0; bp * d];
            let mut gq = vec![0.0; bq * d];
            let mut gq_logits = vec![0.0; bq * d];
            for j in 0..bp {
                for k in 0..bq {
                    let base = (j * bq + k) * d;
                    for i in 0..d {
                        let (a, b) = (pp[j * d + i], qq[k * d + i]);
                        let (la, lb) = (lp[j * d + i], lq[k * d + i]);
                        let lm = log_mix[base + i];
                        // P / (P + Q)
                        let share = if a + b > 0.0 { a / (a + b) } else { sigmoid_raw(la - lb) };
                        let mix_term = 0.5 * (lm + 1.0 - lb);
                        gp[j * d + i] += scale * (la - lm + 1.0 - share + mix_term);
                        gq[k * d + i] += scale * (mix_term - share);
                        // the -M/Q term, already pulled through the softmax:
                        // Q * (-M/Q) - Q * sum(Q * (-M/Q)) = Q - M
                        gq_logits[k * d + i] += scale * (b - 0.5 * (a + b));
                    }
                }
            }
            out.push((p.0, softmax_vjp_rows(&pp, &gp, d)));
            let mut gq = softmax_vjp_rows(&qq, &gq, d);
            gq.iter_mut().zip(&gq_logits).for_each(|(g, e)| *g += e);
            out.push((q.0, gq));
        }
    }
    out.retain(|(input, _)| nodes[*input].requires_grad);
    Ok(out)
}
