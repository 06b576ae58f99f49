//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a reference-counted node holding its value and, when it was
//! produced by a differentiable op, the parents and a closure mapping the
//! output gradient to parent gradients. Calling [`Tensor::backward`] on a
//! scalar walks the graph in reverse topological order and accumulates into
//! the `grad` buffer of every leaf that requires a gradient.
//!
//! Broadcasting is limited to a right operand whose shape is a trailing
//! suffix of the left operand's shape (e.g. a `[d]` bias added to `[n, d]`).

use std::cell::{Ref, RefCell};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

use crate::rng::{self, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor], &[f64]) -> Vec<Option<Vec<f64>>>>;

struct Op {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.0.op.as_ref().map(|o| o.name))
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// `[outer, n, inner]` view of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// `c[m, n] += a[m, k] * b[k, n]`
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (cv, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += aip * bv;
            }
        }
    }
}

fn transpose_buf(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    /// Constant (no gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::Shape { op: "new", lhs: shape.to_vec(), rhs: vec![data.len()] });
        }
        Ok(Self::make(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::Shape { op: "param", lhs: shape.to_vec(), rhs: vec![data.len()] });
        }
        Ok(Self::make(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::make(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::make(vec![], vec![v], false, None)
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let data = rng::normals(rng, numel(shape)).into_iter().map(|v| v * std).collect();
        Self::make(shape.to_vec(), data, false, None)
    }

    fn from_op(shape: Vec<usize>, data: Vec<f64>, name: &'static str, parents: Vec<Tensor>, backward: BackwardFn) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        let op = requires_grad.then(|| Op { name, parents, backward });
        Self::make(shape, data, requires_grad, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the value in place. Only meaningful for leaves.
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    /// Copy without graph history.
    pub fn detach(&self) -> Tensor {
        Self::make(self.0.shape.clone(), self.to_vec(), false, None)
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    // ---- elementwise ----

    fn broadcast_check(&self, other: &Tensor, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
            Ok(())
        } else {
            Err(TensorError::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() })
        }
    }

    fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
        if g.len() == len {
            return g.to_vec();
        }
        let mut out = vec![0.0; len];
        for chunk in g.chunks_exact(len) {
            add_into(&mut out, chunk);
        }
        out
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.broadcast_check(other, "add")?;
        let bl = other.numel();
        let data: Vec<f64> = {
            let (a, b) = (self.data(), other.data());
            a.iter().enumerate().map(|(i, x)| x + b[i % bl]).collect()
        };
        Ok(Self::from_op(
            self.shape().to_vec(),
            data,
            "add",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, _| vec![Some(g.to_vec()), Some(Self::reduce_to(g, bl))]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.broadcast_check(other, "sub")?;
        let bl = other.numel();
        let data: Vec<f64> = {
            let (a, b) = (self.data(), other.data());
            a.iter().enumerate().map(|(i, x)| x - b[i % bl]).collect()
        };
        Ok(Self::from_op(
            self.shape().to_vec(),
            data,
            "sub",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, _| {
                let neg: Vec<f64> = Self::reduce_to(g, bl).iter().map(|v| -v).collect();
                vec![Some(g.to_vec()), Some(neg)]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.broadcast_check(other, "mul")?;
        let bl = other.numel();
        let data: Vec<f64> = {
            let (a, b) = (self.data(), other.data());
            a.iter().enumerate().map(|(i, x)| x * b[i % bl]).collect()
        };
        Ok(Self::from_op(
            self.shape().to_vec(),
            data,
            "mul",
            vec![self.clone(), other.clone()],
            Box::new(move |g, p, _| {
                let (a, b) = (p[0].data(), p[1].data());
                let ga = g.iter().enumerate().map(|(i, gv)| gv * b[i % bl]).collect();
                let gab: Vec<f64> = g.iter().zip(a.iter()).map(|(gv, av)| gv * av).collect();
                vec![Some(ga), Some(Self::reduce_to(&gab, bl))]
            }),
        ))
    }

    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        Self::from_op(
            self.shape().to_vec(),
            data,
            name,
            vec![self.clone()],
            Box::new(move |g, p, out| {
                let x = p[0].data();
                vec![Some(g.iter().zip(x.iter()).zip(out).map(|((gv, &xv), &yv)| gv * df(xv, yv)).collect())]
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary("scale", move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Tensor {
        self.unary(
            "gelu",
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            |x, _| {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            },
        )
    }

    pub fn silu(&self) -> Tensor {
        self.unary("silu", |x| x * sigmoid(x), |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn softplus(&self) -> Tensor {
        self.unary("softplus", |x| x.max(0.0) + (-x.abs()).exp().ln_1p(), |x, _| sigmoid(x))
    }

    /// Clamp with a pass-through gradient inside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary("clamp", move |x| x.clamp(lo, hi), move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 })
    }

    // ---- reductions ----

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum();
        Self::from_op(vec![], vec![s], "sum", vec![self.clone()], Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    // ---- shape ----

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::Shape { op: "reshape", lhs: self.shape().to_vec(), rhs: shape.to_vec() });
        }
        Ok(Self::from_op(shape.to_vec(), self.to_vec(), "reshape", vec![self.clone()], Box::new(|g, _, _| vec![Some(g.to_vec())])))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let &[r, c] = self.shape() else {
            return Err(TensorError::Shape { op: "transpose", lhs: self.shape().to_vec(), rhs: vec![] });
        };
        let data = transpose_buf(&self.data(), r, c);
        Ok(Self::from_op(vec![c, r], data, "transpose", vec![self.clone()], Box::new(move |g, _, _| vec![Some(transpose_buf(g, c, r))])))
    }

    /// `[.., m, k] x [k, n] -> [.., m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() < 2 || b.len() != 2 || a[a.len() - 1] != b[0] {
            return Err(TensorError::Shape { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() });
        }
        let k = b[0];
        let n = b[1];
        let m = numel(&a[..a.len() - 1]);
        let mut shape = a[..a.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; m * n];
        gemm(&self.data(), &other.data(), &mut out, m, k, n);
        Ok(Self::from_op(
            shape,
            out,
            "matmul",
            vec![self.clone(), other.clone()],
            Box::new(move |g, p, _| {
                let ga = p[0].requires_grad().then(|| {
                    let bt = transpose_buf(&p[1].data(), k, n);
                    let mut ga = vec![0.0; m * k];
                    gemm(g, &bt, &mut ga, m, n, k);
                    ga
                });
                let gb = p[1].requires_grad().then(|| {
                    let at = transpose_buf(&p[0].data(), m, k);
                    let mut gb = vec![0.0; k * n];
                    gemm(&at, g, &mut gb, k, m, n);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.matmul(w)?.add(b)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::Axis { op: "softmax", axis, rank });
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..n {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    y[at(j)] /= s;
                }
            }
        }
        drop(x);
        Ok(Self::from_op(
            self.shape().to_vec(),
            y,
            "softmax",
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalizes over the last axis, then applies optional `[d]` gain and bias.
    pub fn layer_norm(&self, gain: Option<&Tensor>, bias: Option<&Tensor>, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or(TensorError::Axis { op: "layer_norm", axis: 0, rank: 0 })?;
        for p in [gain, bias].into_iter().flatten() {
            if p.shape() != [d] {
                return Err(TensorError::Shape { op: "layer_norm", lhs: self.shape().to_vec(), rhs: p.shape().to_vec() });
            }
        }
        let rows = self.numel() / d;
        let x = self.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
        }
        drop(x);
        let g_data = gain.map(|t| t.to_vec());
        let b_data = bias.map(|t| t.to_vec());
        let mut y = xhat.clone();
        for r in 0..rows {
            for j in 0..d {
                let v = &mut y[r * d + j];
                if let Some(gd) = &g_data {
                    *v *= gd[j];
                }
                if let Some(bd) = &b_data {
                    *v += bd[j];
                }
            }
        }
        let mut parents = vec![self.clone()];
        parents.extend(gain.cloned());
        parents.extend(bias.cloned());
        let (has_gain, has_bias) = (gain.is_some(), bias.is_some());
        Ok(Self::from_op(
            self.shape().to_vec(),
            y,
            "layer_norm",
            parents,
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let gxhat: Vec<f64> = match &g_data {
                        Some(gd) => gr.iter().zip(gd).map(|(a, b)| a * b).collect(),
                        None => gr.to_vec(),
                    };
                    let m1 = gxhat.iter().sum::<f64>() / d as f64;
                    let m2 = gxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = inv_std[r] * (gxhat[j] - m1 - xr[j] * m2);
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                    }
                }
                let mut out = vec![Some(gx)];
                if has_gain {
                    out.push(Some(gg));
                }
                if has_bias {
                    out.push(Some(gb));
                }
                out
            }),
        ))
    }

    pub fn concat(ts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = ts.first().ok_or(TensorError::Shape { op: "concat", lhs: vec![], rhs: vec![] })?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(TensorError::Axis { op: "concat", axis, rank });
        }
        for t in ts {
            let ok = t.shape().len() == rank
                && (0..rank).all(|i| i == axis || t.shape()[i] == first.shape()[i]);
            if !ok {
                return Err(TensorError::Shape { op: "concat", lhs: first.shape().to_vec(), rhs: t.shape().to_vec() });
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let widths: Vec<usize> = ts.iter().map(|t| t.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; outer * total];
        let mut offset = 0;
        for (t, &w) in ts.iter().zip(&widths) {
            let src = t.data();
            for o in 0..outer {
                data[o * total + offset..o * total + offset + w].copy_from_slice(&src[o * w..(o + 1) * w]);
            }
            offset += w;
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total / inner;
        Ok(Self::from_op(
            shape,
            data,
            "concat",
            ts.to_vec(),
            Box::new(move |g, _, _| {
                let mut offset = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let mut part = vec![0.0; outer * w];
                        for o in 0..outer {
                            part[o * w..(o + 1) * w].copy_from_slice(&g[o * total + offset..o * total + offset + w]);
                        }
                        offset += w;
                        Some(part)
                    })
                    .collect()
            }),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::Axis { op: "narrow", axis, rank });
        }
        if start + len > self.shape()[axis] {
            return Err(TensorError::Shape { op: "narrow", lhs: self.shape().to_vec(), rhs: vec![start, len] });
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let (src_w, dst_w) = (n * inner, len * inner);
        let x = self.data();
        let mut data = vec![0.0; outer * dst_w];
        for o in 0..outer {
            data[o * dst_w..(o + 1) * dst_w].copy_from_slice(&x[o * src_w + start * inner..o * src_w + start * inner + dst_w]);
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = self.numel();
        Ok(Self::from_op(
            shape,
            data,
            "narrow",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; total];
                for o in 0..outer {
                    gx[o * src_w + start * inner..o * src_w + start * inner + dst_w].copy_from_slice(&g[o * dst_w..(o + 1) * dst_w]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(TensorError::Axis { op: "split", axis, rank });
        }
        if sizes.iter().sum::<usize>() != self.shape()[axis] {
            return Err(TensorError::Shape { op: "split", lhs: self.shape().to_vec(), rhs: sizes.to_vec() });
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let t = self.narrow(axis, start, s);
                start += s;
                t
            })
            .collect()
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        let n = self.numel();
        if numel(shape) != index.len() || index.iter().any(|&i| i >= n) {
            return Err(TensorError::Shape { op: "gather", lhs: self.shape().to_vec(), rhs: shape.to_vec() });
        }
        let data = {
            let x = self.data();
            index.iter().map(|&i| x[i]).collect()
        };
        Ok(Self::from_op(
            shape.to_vec(),
            data,
            "gather",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n];
                for (gv, &i) in g.iter().zip(index.iter()) {
                    gx[i] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Row mixing by a sparse matrix: `out[i, :] = sum_j w_ij self[j, :]`.
    pub fn sparse_rows(&self, rows: Rc<Vec<Vec<(usize, f64)>>>) -> Result<Tensor> {
        let &[r, c] = self.shape() else {
            return Err(TensorError::Shape { op: "sparse_rows", lhs: self.shape().to_vec(), rhs: vec![] });
        };
        if rows.iter().flatten().any(|&(j, _)| j >= r) {
            return Err(TensorError::Shape { op: "sparse_rows", lhs: self.shape().to_vec(), rhs: vec![rows.len()] });
        }
        let x = self.data();
        let mut out = vec![0.0; rows.len() * c];
        for (i, row) in rows.iter().enumerate() {
            for &(j, w) in row {
                for k in 0..c {
                    out[i * c + k] += w * x[j * c + k];
                }
            }
        }
        drop(x);
        Ok(Self::from_op(
            vec![rows.len(), c],
            out,
            "sparse_rows",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; r * c];
                for (i, row) in rows.iter().enumerate() {
                    for &(j, w) in row {
                        for k in 0..c {
                            gx[j * c + k] += w * g[i * c + k];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean squared difference to a constant target of the same shape.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        if self.shape() != target.shape() {
            return Err(TensorError::Shape { op: "mse", lhs: self.shape().to_vec(), rhs: target.shape().to_vec() });
        }
        Ok(self.sub(target)?.square().mean())
    }

    // ---- autodiff ----

    /// Accumulates `d self / d leaf` into every reachable leaf that requires
    /// a gradient. Gradients add up across calls until cleared.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        // Iterative post-order DFS over nodes that require gradients.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.0);
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in &op.parents {
                    if p.requires_grad() && !visited.contains(&Rc::as_ptr(&p.0)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(Rc::as_ptr(&self.0), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&Rc::as_ptr(&t.0)) else {
                continue;
            };
            match &t.0.op {
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => add_into(acc, &g),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let pg = {
                        let out = t.0.data.borrow();
                        (op.backward)(&g, &op.parents, &out)
                    };
                    for (p, gp) in op.parents.iter().zip(pg) {
                        let Some(gp) = gp else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&Rc::as_ptr(&p.0)) {
                            Some(acc) => add_into(acc, &gp),
                            None => {
                                grads.insert(Rc::as_ptr(&p.0), gp);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Param {
    tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named trainable parameters with Adam moment buffers.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.params.iter().map(|(k, p)| (k, p.tensor.shape()))).finish()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let tensor = Tensor::param(values, shape)?;
        let n = tensor.numel();
        self.params.insert(name, Param { tensor: tensor.clone(), m: vec![0.0; n], v: vec![0.0; n] });
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).map(|p| &p.tensor).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.tensor))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&self) {
        for p in self.params.values() {
            p.tensor.zero_grad();
        }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn adam_step(&mut self, cfg: &Adam) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.tensor.0.grad.borrow().is_none()) {
            return Err(TensorError::MissingGrad(name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params.values_mut() {
            let grad = p.tensor.0.grad.borrow();
            let grad = grad.as_ref().expect("checked above");
            let mut data = p.tensor.0.data.borrow_mut();
            for i in 0..data.len() {
                let g = grad[i];
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = p.m[i] / c1;
                let vhat = p.v[i] / c2;
                data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Copies values (not optimizer state) from `other`; names and shapes must match.
    pub fn load_values(&self, other: &ParamStore) -> Result<()> {
        for (name, p) in &self.params {
            let src = other.get(name)?;
            if src.shape() != p.tensor.shape() {
                return Err(TensorError::Shape { op: "load_values", lhs: p.tensor.shape().to_vec(), rhs: src.shape().to_vec() });
            }
            p.tensor.set_data(&src.data());
        }
        if other.len() != self.len() {
            let extra = other.names().find(|n| !self.contains(n)).unwrap_or_default();
            return Err(TensorError::UnknownParam(extra.to_string()));
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TCK1";
const CHECKPOINT_VERSION: u32 = 1;

impl ParamStore {
    /// `TCK1`, u32 version, u32 count, then per parameter (name order)
    /// u32 name length, name bytes, u32 rank, rank x u64 dims; then every
    /// payload as little-endian f64 in the same order.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for p in self.params.values() {
            for v in p.tensor.data().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| TensorError::Checkpoint("name is not utf-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            table.push((name, shape));
        }
        let mut store = ParamStore::new();
        for (name, shape) in table {
            let values = (0..numel(&shape)).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            store.insert(name, values, &shape)?;
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Checkpoint("trailing bytes".into()));
        }
        Ok(store)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| TensorError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Central-difference gradient checking, kept apart from the autodiff path.
pub mod check {
    use super::Tensor;

    /// Worst relative error between autodiff and central differences over
    /// the listed `(tensor, entry)` pairs. `loss` must rebuild the graph from
    /// the current tensor values on every call. Relative error is
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn max_relative_error(
        loss: &dyn Fn() -> Tensor,
        probes: &[(Tensor, Vec<usize>)],
        h: f64,
        floor: f64,
    ) -> f64 {
        for (t, _) in probes {
            t.zero_grad();
        }
        loss().backward().expect("scalar loss");
        let mut worst = 0.0f64;
        for (t, entries) in probes {
            let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            for &i in entries {
                let orig = t.data()[i];
                t.update_data(|d| d[i] = orig + h);
                let up = loss().item();
                t.update_data(|d| d[i] = orig - h);
                let down = loss().item();
                t.update_data(|d| d[i] = orig);
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                worst = worst.max(err);
            }
        }
        worst
    }

    /// Every entry of every tensor.
    pub fn all_entries(ts: &[Tensor]) -> Vec<(Tensor, Vec<usize>)> {
        ts.iter().map(|t| (t.clone(), (0..t.numel()).collect())).collect()
    }
}
