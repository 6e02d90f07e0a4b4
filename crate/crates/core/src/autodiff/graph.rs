//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every leaf created with
//! `requires_grad`. Element-wise binary ops broadcast only over leading
//! dimensions: one operand's shape must be a suffix of the other's.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::conv::{col2im, im2col, ConvGeometry};
use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::sparse::CsrMatrix;
use crate::error::{Error, Result};
use crate::losses::QuadricForm;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm node normalizes its input.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train { eps: f64 },
    /// Normalize with externally supplied running statistics.
    Eval {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-channel statistics of a training batch; `var` is the unbiased estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct BatchNormSaved {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Slice { input: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    L1(Var),
    L2Sq(Var),
    Dot(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    Log(Var),
    Abs(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: Box<BatchNormSaved>,
    },
    Spmm {
        matrix: Rc<CsrMatrix>,
        input: Var,
    },
    GatherRows {
        input: Var,
        index: Rc<[usize]>,
    },
    Cross3(Var, Var),
    NormalizeRows(Var),
    SumLastAxis(Var),
    QuadricEval {
        input: Var,
        forms: Rc<[QuadricForm]>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the graph's leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, detail: impl Into<String>) -> Error {
    Error::InvalidShape {
        op,
        detail: detail.into(),
    }
}

/// Output shape of a leading-dimension broadcast, or an error naming both shapes.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || (a.len() > b.len() && a.ends_with(b)) {
        Ok(a.to_vec())
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        Err(shape_err(op, a, b))
    }
}

/// Sums a full-size gradient back onto an operand of `n` elements.
fn reduce_to(full: &[f64], n: usize) -> Vec<f64> {
    if full.len() == n {
        return full.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in full.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn variable(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v`'s current value into a new constant, cutting the gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
            let n: usize = shape.iter().product();
            let (da, db) = (ta.data(), tb.data());
            let (na, nb) = (da.len(), db.len());
            let data = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
            Tensor::new(shape, data)?
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = {
            let t = self.value(a);
            let data = t.data().iter().map(|&x| f(x)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        };
        let rg = self.requires_grad(a);
        self.push(value, op, rg)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(sigmoid(x))`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let value = {
            let t = self.value(a);
            let c = *t.shape().last().ok_or_else(|| invalid("softmax", "rank-0 input"))?;
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(c) {
                let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    fn reduce_scalar(&self, a: Var, f: impl Fn(&[f64]) -> f64, op: Op) -> Var {
        let v = f(self.value(a).data());
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(v), op, rg)
    }

    pub fn sum(&self, a: Var) -> Var {
        self.reduce_scalar(a, |d| d.iter().sum(), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        self.reduce_scalar(a, |d| d.iter().sum::<f64>() / d.len() as f64, Op::Mean(a))
    }

    /// Sum of absolute values.
    pub fn l1_norm(&self, a: Var) -> Var {
        self.reduce_scalar(a, |d| d.iter().map(|x| x.abs()).sum(), Op::L1(a))
    }

    /// Sum of squares.
    pub fn l2_norm_sq(&self, a: Var) -> Var {
        self.reduce_scalar(a, |d| d.iter().map(|x| x * x).sum(), Op::L2Sq(a))
    }

    /// Full contraction of two equally shaped tensors.
    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.shape() != tb.shape() {
                return Err(shape_err("dot", ta.shape(), tb.shape()));
            }
            ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum()
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), rg))
    }

    /// `a[.., m, k] x b[k, n] -> [.., m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
                return Err(shape_err("matmul", sa, sb));
            }
            let (k, n) = (sb[0], sb[1]);
            let rows = ta.numel() / k;
            let mut out = vec![0.0; rows * n];
            gemm_nn(rows, k, n, ta.data(), tb.data(), &mut out);
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::new(shape, out)?
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?.0]
                .value
                .shape()
                .to_vec();
            if axis >= first.len() {
                return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
            }
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut total = 0;
            for v in inputs {
                let s = nodes[v.0].value.shape();
                if s.len() != first.len()
                    || s[..axis] != first[..axis]
                    || s[axis + 1..] != first[axis + 1..]
                {
                    return Err(shape_err("concat", &first, s));
                }
                total += s[axis];
            }
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let value = {
            let t = self.value(a);
            let s = t.shape();
            if axis >= s.len() || start >= end || end > s[axis] {
                return Err(invalid(
                    "slice",
                    format!("range {start}..{end} on axis {axis} of {s:?}"),
                ));
            }
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = (o * s[axis] + start) * inner;
                data.extend_from_slice(&t.data()[base..base + (end - start) * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = end - start;
            Tensor::new(shape, data)?
        };
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Slice { input: a, axis, start }, rg))
    }

    /// Cross-correlation of `input[B, C, H, W]` with `kernel[K, C, kh, kw]`.
    pub fn conv2d(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, w) = (&nodes[input.0].value, &nodes[kernel.0].value);
            let (sx, sw) = (x.shape(), w.shape());
            if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || (sw[2], sw[3]) != geom.kernel {
                return Err(shape_err("conv2d", sx, sw));
            }
            let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let k = sw[0];
            let (oh, ow) = geom.conv_output(h, wd)?;
            let ckk = c * geom.kernel.0 * geom.kernel.1;
            let plane = oh * ow;
            let bias_v = match bias {
                Some(bv) => {
                    let t = &nodes[bv.0].value;
                    if t.shape() != [k] {
                        return Err(shape_err("conv2d bias", t.shape(), &[k]));
                    }
                    Some(t.data())
                }
                None => None,
            };
            let mut out = vec![0.0; b * k * plane];
            let mut col = vec![0.0; ckk * plane];
            for bi in 0..b {
                im2col(
                    &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd],
                    c,
                    (h, wd),
                    (oh, ow),
                    &geom,
                    &mut col,
                );
                let ob = &mut out[bi * k * plane..(bi + 1) * k * plane];
                if let Some(bv) = bias_v {
                    for (ki, row) in ob.chunks_mut(plane).enumerate() {
                        row.fill(bv[ki]);
                    }
                }
                gemm_nn(k, ckk, plane, w.data(), &col, ob);
            }
            Tensor::new(vec![b, k, oh, ow], out)?
        };
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Transposed convolution of `input[B, Cin, H, W]` with `kernel[Cin, Cout, kh, kw]`;
    /// the exact adjoint of [`Graph::conv2d`] with the same geometry.
    pub fn conv_transpose2d(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, w) = (&nodes[input.0].value, &nodes[kernel.0].value);
            let (sx, sw) = (x.shape(), w.shape());
            if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || (sw[2], sw[3]) != geom.kernel {
                return Err(shape_err("conv_transpose2d", sx, sw));
            }
            let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let cout = sw[1];
            let (oh, ow) = geom.transposed_output(h, wd)?;
            if geom.conv_output(oh, ow)? != (h, wd) {
                return Err(invalid("conv_transpose2d", "geometry is not invertible"));
            }
            let ckk = cout * geom.kernel.0 * geom.kernel.1;
            let plane_in = h * wd;
            let plane_out = oh * ow;
            let mut out = vec![0.0; b * cout * plane_out];
            let mut col = vec![0.0; ckk * plane_in];
            for bi in 0..b {
                col.fill(0.0);
                gemm_tn(
                    ckk,
                    cin,
                    plane_in,
                    w.data(),
                    &x.data()[bi * cin * plane_in..(bi + 1) * cin * plane_in],
                    &mut col,
                );
                let ob = &mut out[bi * cout * plane_out..(bi + 1) * cout * plane_out];
                col2im(&col, cout, (oh, ow), (h, wd), &geom, ob);
            }
            if let Some(bv) = bias {
                let t = &nodes[bv.0].value;
                if t.shape() != [cout] {
                    return Err(shape_err("conv_transpose2d bias", t.shape(), &[cout]));
                }
                for (i, chunk) in out.chunks_mut(plane_out).enumerate() {
                    let v = t.data()[i % cout];
                    chunk.iter_mut().for_each(|o| *o += v);
                }
            }
            Tensor::new(vec![b, cout, oh, ow], out)?
        };
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Per-channel normalization of `input[B, C, ...]` (channel axis 1).
    /// In train mode also returns the batch statistics for running averages.
    pub fn batch_norm(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (value, saved, stats) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let s = x.shape();
            if s.len() < 2 {
                return Err(invalid("batch_norm", format!("input {s:?} needs rank >= 2")));
            }
            let (b, c) = (s[0], s[1]);
            let spatial: usize = s[2..].iter().product();
            let (gm, bt) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            if gm.shape() != [c] || bt.shape() != [c] {
                return Err(shape_err("batch_norm", s, gm.shape()));
            }
            let m = (b * spatial) as f64;
            let xd = x.data();
            let idx = |bi: usize, ci: usize, si: usize| (bi * c + ci) * spatial + si;
            let (mean, inv_std, train, stats) = match mode {
                BatchNormMode::Train { eps } => {
                    if b < 2 {
                        return Err(Error::BatchTooSmall);
                    }
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for bi in 0..b {
                            for si in 0..spatial {
                                acc += xd[idx(bi, ci, si)];
                            }
                        }
                        mean[ci] = acc / m;
                        let mut acc = 0.0;
                        for bi in 0..b {
                            for si in 0..spatial {
                                let d = xd[idx(bi, ci, si)] - mean[ci];
                                acc += d * d;
                            }
                        }
                        var[ci] = acc / m;
                    }
                    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    let unbiased = var.iter().map(|v| v * m / (m - 1.0)).collect();
                    let stats = BatchStats {
                        mean: mean.clone(),
                        var: unbiased,
                    };
                    (mean, inv, true, Some(stats))
                }
                BatchNormMode::Eval { mean, var, eps } => {
                    if mean.len() != c || var.len() != c {
                        return Err(shape_err("batch_norm running stats", &[c], &[mean.len()]));
                    }
                    let inv = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    (mean.to_vec(), inv, false, None)
                }
            };
            let mut xhat = vec![0.0; xd.len()];
            let mut out = vec![0.0; xd.len()];
            for bi in 0..b {
                for ci in 0..c {
                    for si in 0..spatial {
                        let i = idx(bi, ci, si);
                        xhat[i] = (xd[i] - mean[ci]) * inv_std[ci];
                        out[i] = gm.data()[ci] * xhat[i] + bt.data()[ci];
                    }
                }
            }
            (
                Tensor::new(s.to_vec(), out)?,
                BatchNormSaved {
                    xhat,
                    inv_std,
                    train,
                },
                stats,
            )
        };
        let rg = self.any_grad(&[input, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved: Box::new(saved),
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Applies a fixed sparse operator along the node axis:
    /// `input[.., N, C] -> [.., R, C]` for an `R x N` matrix.
    pub fn spmm(&self, matrix: Rc<CsrMatrix>, input: Var) -> Result<Var> {
        let value = {
            let t = self.value(input);
            let s = t.shape();
            if s.len() < 2 || s[s.len() - 2] != matrix.cols() {
                return Err(shape_err("spmm", s, &[matrix.rows(), matrix.cols()]));
            }
            let width = s[s.len() - 1];
            let n = matrix.cols();
            let batch = t.numel() / (n * width);
            let r = matrix.rows();
            let mut out = vec![0.0; batch * r * width];
            for bi in 0..batch {
                matrix.apply(
                    &t.data()[bi * n * width..(bi + 1) * n * width],
                    width,
                    &mut out[bi * r * width..(bi + 1) * r * width],
                );
            }
            let mut shape = s.to_vec();
            let len = shape.len();
            shape[len - 2] = r;
            Tensor::new(shape, out)?
        };
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Spmm { matrix, input }, rg))
    }

    /// Selects rows along the node axis: `input[.., N, C] -> [.., R, C]`.
    pub fn gather_rows(&self, input: Var, index: Rc<[usize]>) -> Result<Var> {
        let value = {
            let t = self.value(input);
            let s = t.shape();
            if s.len() < 2 {
                return Err(invalid("gather_rows", format!("input {s:?} needs rank >= 2")));
            }
            let n = s[s.len() - 2];
            let width = s[s.len() - 1];
            if let Some(&bad) = index.iter().find(|&&i| i >= n) {
                return Err(Error::Range { index: bad, len: n });
            }
            let batch = t.numel() / (n * width);
            let mut out = Vec::with_capacity(batch * index.len() * width);
            for bi in 0..batch {
                for &i in index.iter() {
                    let base = (bi * n + i) * width;
                    out.extend_from_slice(&t.data()[base..base + width]);
                }
            }
            let mut shape = s.to_vec();
            let len = shape.len();
            shape[len - 2] = index.len();
            Tensor::new(shape, out)?
        };
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::GatherRows { input, index }, rg))
    }

    /// Row-wise cross product of two `[.., 3]` tensors.
    pub fn cross3(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.shape() != tb.shape() || ta.shape().last() != Some(&3) {
                return Err(shape_err("cross3", ta.shape(), tb.shape()));
            }
            let mut out = Vec::with_capacity(ta.numel());
            for (u, v) in ta.data().chunks(3).zip(tb.data().chunks(3)) {
                out.extend_from_slice(&cross(u, v));
            }
            Tensor::new(ta.shape().to_vec(), out)?
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Cross3(a, b), rg))
    }

    /// Scales each last-axis row to unit length; zero rows stay zero.
    pub fn normalize_rows(&self, a: Var) -> Result<Var> {
        let value = {
            let t = self.value(a);
            let c = *t.shape().last().ok_or_else(|| invalid("normalize_rows", "rank-0 input"))?;
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(c) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.iter_mut().for_each(|x| *x /= n);
                }
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::NormalizeRows(a), rg))
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last_axis(&self, a: Var) -> Result<Var> {
        let value = {
            let t = self.value(a);
            let s = t.shape();
            let c = *s.last().ok_or_else(|| invalid("sum_last_axis", "rank-0 input"))?;
            let data = t.data().chunks(c).map(|r| r.iter().sum()).collect();
            Tensor::new(s[..s.len() - 1].to_vec(), data)?
        };
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::SumLastAxis(a), rg))
    }

    /// Evaluates one quadric per point: `input[.., N, 3] -> [.., N]`.
    /// `forms` holds either `N` forms (shared across the batch) or one per point.
    pub fn quadric_eval(&self, input: Var, forms: Rc<[QuadricForm]>) -> Result<Var> {
        let value = {
            let t = self.value(input);
            let s = t.shape();
            if s.len() < 2 || s[s.len() - 1] != 3 {
                return Err(invalid("quadric_eval", format!("input {s:?} must end in 3")));
            }
            let points = t.numel() / 3;
            let n = s[s.len() - 2];
            if forms.len() != points && forms.len() != n {
                return Err(shape_err("quadric_eval", s, &[forms.len()]));
            }
            let data = t
                .data()
                .chunks(3)
                .enumerate()
                .map(|(i, p)| forms[i % forms.len()].eval([p[0], p[1], p[2]]))
                .collect();
            Tensor::new(s[..s.len() - 1].to_vec(), data)?
        };
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::QuadricEval { input, forms }, rg))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let ln = &nodes[loss.0];
        if ln.value.numel() != 1 {
            return Err(Error::NonScalarLoss(ln.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if ln.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut out: Vec<Option<Tensor>> = Vec::new();
        out.resize_with(loss.0 + 1, || None);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            } else {
                propagate(&nodes, node, &g, &mut grads);
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn cross(u: &[f64], v: &[f64]) -> [f64; 3] {
    [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ]
}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, data: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(data).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(data),
    }
}

fn val(nodes: &[Node], v: Var) -> &Tensor {
    &nodes[v.0].value
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let (na, nb) = (val(nodes, *a).numel(), val(nodes, *b).numel());
            acc(nodes, grads, *a, reduce_to(g, na));
            let mut gb = reduce_to(g, nb);
            if matches!(node.op, Op::Sub(..)) {
                gb.iter_mut().for_each(|x| *x = -*x);
            }
            acc(nodes, grads, *b, gb);
        }
        Op::Mul(a, b) => {
            let (da, db) = (val(nodes, *a).data(), val(nodes, *b).data());
            let (na, nb) = (da.len(), db.len());
            if nodes[a.0].requires_grad {
                let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * db[i % nb]).collect();
                acc(nodes, grads, *a, reduce_to(&full, na));
            }
            if nodes[b.0].requires_grad {
                let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * da[i % na]).collect();
                acc(nodes, grads, *b, reduce_to(&full, nb));
            }
        }
        Op::Neg(a) => acc(nodes, grads, *a, g.iter().map(|x| -x).collect()),
        Op::Scale(a, c) => acc(nodes, grads, *a, g.iter().map(|x| c * x).collect()),
        Op::AddScalar(a) | Op::Reshape(a) => acc(nodes, grads, *a, g.to_vec()),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(nodes, *a), val(nodes, *b));
            let (k, n) = (tb.shape()[0], tb.shape()[1]);
            let rows = ta.numel() / k;
            if nodes[a.0].requires_grad {
                let mut ga = vec![0.0; rows * k];
                gemm_nt(rows, n, k, g, tb.data(), &mut ga);
                acc(nodes, grads, *a, ga);
            }
            if nodes[b.0].requires_grad {
                let mut gb = vec![0.0; k * n];
                gemm_tn(k, rows, n, ta.data(), g, &mut gb);
                acc(nodes, grads, *b, gb);
            }
        }
        Op::Concat { inputs, axis } => {
            let s = node.value.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let total = s[*axis] * inner;
            let mut offset = 0;
            for v in inputs {
                let chunk = val(nodes, *v).shape()[*axis] * inner;
                if nodes[v.0].requires_grad {
                    let mut gv = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        gv.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                    }
                    acc(nodes, grads, *v, gv);
                }
                offset += chunk;
            }
        }
        Op::Slice { input, axis, start } => {
            let s = val(nodes, *input).shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let len = node.value.shape()[*axis];
            let mut gi = vec![0.0; val(nodes, *input).numel()];
            for o in 0..outer {
                let dst = (o * s[*axis] + start) * inner;
                gi[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            acc(nodes, grads, *input, gi);
        }
        Op::Sum(a) => acc(nodes, grads, *a, vec![g[0]; val(nodes, *a).numel()]),
        Op::Mean(a) => {
            let n = val(nodes, *a).numel();
            acc(nodes, grads, *a, vec![g[0] / n as f64; n]);
        }
        Op::L1(a) => {
            let d = val(nodes, *a).data();
            acc(nodes, grads, *a, d.iter().map(|&x| g[0] * sign(x)).collect());
        }
        Op::L2Sq(a) => {
            let d = val(nodes, *a).data();
            acc(nodes, grads, *a, d.iter().map(|&x| 2.0 * g[0] * x).collect());
        }
        Op::Dot(a, b) => {
            let (da, db) = (val(nodes, *a).data(), val(nodes, *b).data());
            acc(nodes, grads, *a, db.iter().map(|x| g[0] * x).collect());
            acc(nodes, grads, *b, da.iter().map(|x| g[0] * x).collect());
        }
        Op::Relu(a) => {
            let d = val(nodes, *a).data();
            let gi = d.iter().zip(g).map(|(&x, gv)| if x > 0.0 { *gv } else { 0.0 }).collect();
            acc(nodes, grads, *a, gi);
        }
        Op::LeakyRelu(a, slope) => {
            let d = val(nodes, *a).data();
            let gi = d
                .iter()
                .zip(g)
                .map(|(&x, gv)| if x > 0.0 { *gv } else { slope * gv })
                .collect();
            acc(nodes, grads, *a, gi);
        }
        Op::Sigmoid(a) => {
            let gi = y.iter().zip(g).map(|(s, gv)| gv * s * (1.0 - s)).collect();
            acc(nodes, grads, *a, gi);
        }
        Op::LogSigmoid(a) => {
            let d = val(nodes, *a).data();
            let gi = d.iter().zip(g).map(|(&x, gv)| gv * sigmoid(-x)).collect();
            acc(nodes, grads, *a, gi);
        }
        Op::Softmax(a) => {
            let c = *node.value.shape().last().unwrap();
            let mut gi = vec![0.0; y.len()];
            for ((yr, gr), out) in y.chunks(c).zip(g.chunks(c)).zip(gi.chunks_mut(c)) {
                let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for ((o, p), q) in out.iter_mut().zip(yr).zip(gr) {
                    *o = p * (q - s);
                }
            }
            acc(nodes, grads, *a, gi);
        }
        Op::Log(a) => {
            let d = val(nodes, *a).data();
            acc(nodes, grads, *a, d.iter().zip(g).map(|(x, gv)| gv / x).collect());
        }
        Op::Abs(a) => {
            let d = val(nodes, *a).data();
            acc(nodes, grads, *a, d.iter().zip(g).map(|(&x, gv)| gv * sign(x)).collect());
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            let (x, w) = (val(nodes, *input), val(nodes, *kernel));
            let (sx, sw) = (x.shape(), w.shape());
            let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let k = sw[0];
            let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
            let ckk = c * geom.kernel.0 * geom.kernel.1;
            let plane = oh * ow;
            let need_x = nodes[input.0].requires_grad;
            let need_w = nodes[kernel.0].requires_grad;
            let mut gx = if need_x { vec![0.0; x.numel()] } else { Vec::new() };
            let mut gw = if need_w { vec![0.0; w.numel()] } else { Vec::new() };
            let mut col = vec![0.0; ckk * plane];
            let mut gcol = vec![0.0; ckk * plane];
            for bi in 0..b {
                let gb = &g[bi * k * plane..(bi + 1) * k * plane];
                if need_w {
                    im2col(
                        &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd],
                        c,
                        (h, wd),
                        (oh, ow),
                        geom,
                        &mut col,
                    );
                    gemm_nt(k, plane, ckk, gb, &col, &mut gw);
                }
                if need_x {
                    gcol.fill(0.0);
                    gemm_tn(ckk, k, plane, w.data(), gb, &mut gcol);
                    col2im(
                        &gcol,
                        c,
                        (h, wd),
                        (oh, ow),
                        geom,
                        &mut gx[bi * c * h * wd..(bi + 1) * c * h * wd],
                    );
                }
            }
            if need_x {
                acc(nodes, grads, *input, gx);
            }
            if need_w {
                acc(nodes, grads, *kernel, gw);
            }
            if let Some(bv) = bias {
                let mut gbias = vec![0.0; k];
                for (i, chunk) in g.chunks(plane).enumerate() {
                    gbias[i % k] += chunk.iter().sum::<f64>();
                }
                acc(nodes, grads, *bv, gbias);
            }
        }
        Op::ConvTranspose2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            let (x, w) = (val(nodes, *input), val(nodes, *kernel));
            let (sx, sw) = (x.shape(), w.shape());
            let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let cout = sw[1];
            let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
            let ckk = cout * geom.kernel.0 * geom.kernel.1;
            let plane_in = h * wd;
            let plane_out = oh * ow;
            let need_x = nodes[input.0].requires_grad;
            let need_w = nodes[kernel.0].requires_grad;
            let mut gx = if need_x { vec![0.0; x.numel()] } else { Vec::new() };
            let mut gw = if need_w { vec![0.0; w.numel()] } else { Vec::new() };
            let mut col = vec![0.0; ckk * plane_in];
            if need_x || need_w {
                for bi in 0..b {
                    im2col(
                        &g[bi * cout * plane_out..(bi + 1) * cout * plane_out],
                        cout,
                        (oh, ow),
                        (h, wd),
                        geom,
                        &mut col,
                    );
                    if need_x {
                        gemm_nn(
                            cin,
                            ckk,
                            plane_in,
                            w.data(),
                            &col,
                            &mut gx[bi * cin * plane_in..(bi + 1) * cin * plane_in],
                        );
                    }
                    if need_w {
                        gemm_nt(
                            cin,
                            plane_in,
                            ckk,
                            &x.data()[bi * cin * plane_in..(bi + 1) * cin * plane_in],
                            &col,
                            &mut gw,
                        );
                    }
                }
            }
            if need_x {
                acc(nodes, grads, *input, gx);
            }
            if need_w {
                acc(nodes, grads, *kernel, gw);
            }
            if let Some(bv) = bias {
                let mut gbias = vec![0.0; cout];
                for (i, chunk) in g.chunks(plane_out).enumerate() {
                    gbias[i % cout] += chunk.iter().sum::<f64>();
                }
                acc(nodes, grads, *bv, gbias);
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            saved,
        } => {
            let s = node.value.shape();
            let (b, c) = (s[0], s[1]);
            let spatial: usize = s[2..].iter().product();
            let m = (b * spatial) as f64;
            let gm = val(nodes, *gamma).data();
            let idx = |bi: usize, ci: usize, si: usize| (bi * c + ci) * spatial + si;
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    for si in 0..spatial {
                        let i = idx(bi, ci, si);
                        sum_g[ci] += g[i];
                        sum_gx[ci] += g[i] * saved.xhat[i];
                    }
                }
            }
            if nodes[input.0].requires_grad {
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let scale = gm[ci] * saved.inv_std[ci];
                        for si in 0..spatial {
                            let i = idx(bi, ci, si);
                            gx[i] = if saved.train {
                                scale / m * (m * g[i] - sum_g[ci] - saved.xhat[i] * sum_gx[ci])
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
                acc(nodes, grads, *input, gx);
            }
            acc(nodes, grads, *gamma, sum_gx);
            acc(nodes, grads, *beta, sum_g);
        }
        Op::Spmm { matrix, input } => {
            let ti = val(nodes, *input);
            let s = ti.shape();
            let width = s[s.len() - 1];
            let (n, r) = (matrix.cols(), matrix.rows());
            let batch = ti.numel() / (n * width);
            let mut gi = vec![0.0; ti.numel()];
            for bi in 0..batch {
                matrix.apply_transpose(
                    &g[bi * r * width..(bi + 1) * r * width],
                    width,
                    &mut gi[bi * n * width..(bi + 1) * n * width],
                );
            }
            acc(nodes, grads, *input, gi);
        }
        Op::GatherRows { input, index } => {
            let ti = val(nodes, *input);
            let s = ti.shape();
            let width = s[s.len() - 1];
            let n = s[s.len() - 2];
            let batch = ti.numel() / (n * width);
            let mut gi = vec![0.0; ti.numel()];
            for bi in 0..batch {
                for (j, &i) in index.iter().enumerate() {
                    let src = (bi * index.len() + j) * width;
                    let dst = (bi * n + i) * width;
                    for w in 0..width {
                        gi[dst + w] += g[src + w];
                    }
                }
            }
            acc(nodes, grads, *input, gi);
        }
        Op::Cross3(a, b) => {
            let (da, db) = (val(nodes, *a).data(), val(nodes, *b).data());
            let mut ga = Vec::with_capacity(da.len());
            let mut gb = Vec::with_capacity(db.len());
            for ((u, v), gr) in da.chunks(3).zip(db.chunks(3)).zip(g.chunks(3)) {
                ga.extend_from_slice(&cross(v, gr));
                gb.extend_from_slice(&cross(gr, u));
            }
            acc(nodes, grads, *a, ga);
            acc(nodes, grads, *b, gb);
        }
        Op::NormalizeRows(a) => {
            let x = val(nodes, *a);
            let c = *x.shape().last().unwrap();
            let mut gi = vec![0.0; x.numel()];
            for (((xr, yr), gr), out) in x
                .data()
                .chunks(c)
                .zip(y.chunks(c))
                .zip(g.chunks(c))
                .zip(gi.chunks_mut(c))
            {
                let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    continue;
                }
                let yg: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for ((o, p), q) in out.iter_mut().zip(yr).zip(gr) {
                    *o = (q - p * yg) / n;
                }
            }
            acc(nodes, grads, *a, gi);
        }
        Op::SumLastAxis(a) => {
            let x = val(nodes, *a);
            let c = *x.shape().last().unwrap();
            let gi = (0..x.numel()).map(|i| g[i / c]).collect();
            acc(nodes, grads, *a, gi);
        }
        Op::QuadricEval { input, forms } => {
            let x = val(nodes, *input);
            let mut gi = Vec::with_capacity(x.numel());
            for (i, p) in x.data().chunks(3).enumerate() {
                let d = forms[i % forms.len()].gradient([p[0], p[1], p[2]]);
                gi.extend(d.iter().map(|v| v * g[i]));
            }
            acc(nodes, grads, *input, gi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_leaky_values() {
        let g = Graph::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        assert_eq!(g.value(g.relu(x)).data(), &[0.0, 2.0]);
        let l = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(l).data()[0], -0.2);
        assert_eq!(g.value(l).data()[1], 2.0);
    }

    #[test]
    fn sum_and_dot_gradients() {
        let g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 0.5]));
        let d = g.dot(x, x).unwrap();
        let grads = g.backward(d).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn reused_variable_accumulates() {
        let g = Graph::new();
        let x = g.variable(t(&[2], &[3.0, 4.0]));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap();
        let loss = g.sum(z);
        let grads = g.backward(loss).unwrap();
        // d/dx (2x^2) = 4x
        assert_eq!(grads.get(x).unwrap().data(), &[12.0, 16.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn broadcast_only_over_leading_dims() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        let c = g.constant(Tensor::zeros(&[2]));
        assert_eq!(g.shape(g.add(a, b).unwrap()), vec![2, 3]);
        let err = g.add(a, c).unwrap_err();
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[2]"));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let g = Graph::new();
        let x = g.constant(t(&[3], &[-800.0, 0.0, 800.0]));
        let v = g.value(g.log_sigmoid(x)).clone();
        assert_eq!(v.data()[0], -800.0);
        assert!((v.data()[1] + std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(v.data()[2], 0.0);
    }

    #[test]
    fn conv_of_ones_counts_overlaps() {
        // 4x4 ones, 4x4 ones kernel, stride 2, pad 1 -> each output counts
        // the in-bounds taps of its window.
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let y = g.conv2d(x, w, None, ConvGeometry::DOWN4).unwrap();
        assert_eq!(g.value(y).data(), &[9.0, 9.0, 9.0, 9.0]);
    }

    #[test]
    fn single_tap_kernel_is_strided_copy() {
        let g = Graph::new();
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let x = g.constant(t(&[1, 1, 4, 4], &data));
        let mut k = vec![0.0; 16];
        k[5] = 1.0; // tap (1,1): with pad 1 reads x[2i, 2j]
        let w = g.constant(t(&[1, 1, 4, 4], &k));
        let y = g.conv2d(x, w, None, ConvGeometry::DOWN4).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn odd_spatial_dims_rejected() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 5, 4]));
        let w = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(g.conv2d(x, w, None, ConvGeometry::DOWN4).is_err());
    }

    #[test]
    fn transposed_conv_doubles_spatial_dims() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 4, 5], 1.0));
        let w = g.constant(Tensor::full(&[3, 2, 4, 4], 0.1));
        let y = g.conv_transpose2d(x, w, None, ConvGeometry::DOWN4).unwrap();
        assert_eq!(g.shape(y), vec![2, 2, 8, 10]);
    }

    #[test]
    fn batchnorm_train_normalizes_and_rejects_single_batch() {
        let g = Graph::new();
        let x = g.constant(t(&[4, 2], &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0]));
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::full(&[2], 0.5));
        let (y, stats) = g
            .batch_norm(x, gamma, beta, BatchNormMode::Train { eps: 1e-12 })
            .unwrap();
        let v = g.value(y).clone();
        let col0: Vec<f64> = v.data().iter().step_by(2).copied().collect();
        let mean: f64 = col0.iter().sum::<f64>() / 4.0;
        let var: f64 = col0.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((mean - 0.5).abs() < 1e-12 && (var - 1.0).abs() < 1e-6);
        // constant channel -> beta
        assert!(v.data().iter().skip(1).step_by(2).all(|&x| (x - 0.5).abs() < 1e-12));
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.5, 5.0]);

        let x1 = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            g.batch_norm(x1, gamma, beta, BatchNormMode::Train { eps: 1e-5 }),
            Err(Error::BatchTooSmall)
        ));
        let mean = [0.0, 0.0];
        let var = [1.0, 1.0];
        assert!(g
            .batch_norm(x1, gamma, beta, BatchNormMode::Eval { mean: &mean, var: &var, eps: 0.0 })
            .is_ok());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
