//! A small dense tensor engine with reverse-mode differentiation.
//!
//! Values live on a [`Tape`]: every operation appends a node holding its
//! result and enough context to run its backward rule. Trainable
//! parameters live outside the tape in a [`ParamStore`] and are bound to
//! the tape once per step.

mod geometry;
mod nn;
mod optim;

pub use geometry::{face_areas, has_degenerate_face, Faces};
pub use nn::{batch_norm, kl_divergence, reparameterize, BatchNormMode, BatchNormState, BN_EPS, BN_MOMENTUM};
pub use optim::{AdamW, ParamId, ParamStore};

use crate::sparse::CsrMatrix;
use std::collections::HashMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {op} (node {node})")]
    NonFiniteDetected { node: usize, op: &'static str },
}

/// Row-major array of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Affine { x: Var, w: Var, b: Option<Var> },
    SparseMatmul { m: Arc<CsrMatrix>, x: Var },
    Relu(Var),
    Elu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    AbsSum(Var),
    SqSum(Var),
    Concat { parts: Vec<(Var, usize)> },
    Slice { x: Var, start: usize, width: usize },
    Reshape(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    Standardize { x: Var, inv_std: Arc<Vec<f64>> },
    BatchNorm(nn::BatchNormRecord),
    Conformal(geometry::ConformalRecord),
    VertexNormals(geometry::NormalsRecord),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Affine { .. } => "affine",
            Op::SparseMatmul { .. } => "sparse_matmul",
            Op::Relu(_) => "relu",
            Op::Elu(_) => "elu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "reduce_sum",
            Op::AbsSum(_) => "abs_sum",
            Op::SqSum(_) => "sq_sum",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::Standardize { .. } => "standardize",
            Op::BatchNorm(_) => "batch_norm",
            Op::Conformal(_) => "conformal_factor",
            Op::VertexNormals(_) => "vertex_normals",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    non_finite: Option<(usize, &'static str)>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of a bound parameter; `None` if it never reached the tape.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }
}

fn mismatch(msg: String) -> TensorError {
    TensorError::ShapeMismatch(msg)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.non_finite.is_none() && value.data.iter().any(|x| !x.is_finite()) {
            self.non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// First value of a node; convenient for scalars.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// Fails if any forward value so far was NaN or infinite.
    pub fn ensure_finite(&self) -> Result<(), TensorError> {
        match self.non_finite {
            Some((node, op)) => Err(TensorError::NonFiniteDetected { node, op }),
            None => Ok(()),
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&a| f(a)).collect(),
        };
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(mismatch(format!("{} of {:?} and {:?}", op.name(), av.shape, bv.shape)));
        }
        let out = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    /// `x · W + b` over the last axis of `x`; `W` is `in × out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape.len() != 2 || xv.last_dim() != wv.shape[0] {
            return Err(mismatch(format!("affine of {:?} by {:?}", xv.shape, wv.shape)));
        }
        let (din, dout) = (wv.shape[0], wv.shape[1]);
        if let Some(b) = b {
            if self.value(b).len() != dout {
                return Err(mismatch(format!("bias of {:?} for width {dout}", self.value(b).shape)));
            }
        }
        let rows = xv.len() / din;
        let mut data = vec![0.0; rows * dout];
        for r in 0..rows {
            let out = &mut data[r * dout..(r + 1) * dout];
            if let Some(b) = b {
                out.copy_from_slice(&self.value(b).data);
            }
            for (k, &a) in xv.data[r * din..(r + 1) * din].iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &wk) in out.iter_mut().zip(&wv.data[k * dout..(k + 1) * dout]) {
                    *o += a * wk;
                }
            }
        }
        let mut shape = xv.shape.clone();
        *shape.last_mut().expect("nonempty shape") = dout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor { shape, data }, Op::Affine { x, w, b }, rg))
    }

    /// `S · x` applied to every batch item; `x` is `[.., cols, C]` and the
    /// result `[.., rows, C]`. Only `x` is differentiated.
    pub fn sparse_matmul(&mut self, m: &Arc<CsrMatrix>, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let n = xv.shape.len();
        if n < 2 || xv.shape[n - 2] != m.cols() {
            return Err(mismatch(format!(
                "sparse {}x{} times {:?}",
                m.rows(),
                m.cols(),
                xv.shape
            )));
        }
        let batch = xv.len() / (m.cols() * c);
        let mut data = vec![0.0; batch * m.rows() * c];
        for b in 0..batch {
            m.matmul_into(
                &xv.data[b * m.cols() * c..(b + 1) * m.cols() * c],
                c,
                &mut data[b * m.rows() * c..(b + 1) * m.rows() * c],
            );
        }
        let mut shape = xv.shape.clone();
        shape[n - 2] = m.rows();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::SparseMatmul { m: m.clone(), x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |a| a.max(0.0))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Elu(x), |a| if a > 0.0 { a } else { a.exp_m1() })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |a| a * a)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |a| a * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |a| a + s)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |a| a.clamp(lo, hi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn reduce(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let terms: Vec<f64> = self.value(x).data.iter().map(|&a| f(a)).collect();
        let rg = self.rg(x);
        self.push(Tensor::scalar(crate::util::pairwise_sum(&terms)), op, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, Op::Sum(x), |a| a)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ |x|`, the L1 norm.
    pub fn abs_sum(&mut self, x: Var) -> Var {
        self.reduce(x, Op::AbsSum(x), f64::abs)
    }

    /// `Σ x²`, the squared L2 norm.
    pub fn sq_sum(&mut self, x: Var) -> Var {
        self.reduce(x, Op::SqSum(x), |a| a * a)
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(parts[0]).shape.clone();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = &self.value(p).shape;
            if &s[..s.len() - 1] != lead {
                return Err(mismatch(format!("concat of {first:?} and {s:?}")));
            }
            widths.push(*s.last().expect("nonempty"));
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(Tensor { shape, data }, Op::Concat { parts }, rg))
    }

    /// Columns `start .. start + width` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if start + width > d {
            return Err(mismatch(format!("slice {start}+{width} of width {d}")));
        }
        let rows = xv.len() / d;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xv.data[r * d + start..r * d + start + width]);
        }
        let mut shape = xv.shape.clone();
        *shape.last_mut().expect("nonempty") = width;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Slice { x, start, width }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(mismatch(format!("reshape {:?} to {shape:?}", xv.shape)));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: xv.data.clone(),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Selects items along the first axis (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let count = xv.shape[0];
        let stride = xv.len() / count.max(1);
        if let Some(&bad) = rows.iter().find(|&&r| r >= count) {
            return Err(mismatch(format!("row {bad} of {count}")));
        }
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&xv.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = xv.shape.clone();
        shape[0] = rows.len();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    /// `(x − mean) / std` with constant statistics shaped like one batch
    /// item and repeated over the leading axis.
    pub fn standardize(&mut self, x: Var, mean: &[f64], std: &[f64]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let k = mean.len();
        if std.len() != k || k == 0 || !xv.len().is_multiple_of(k) {
            return Err(mismatch(format!("standardize {:?} with {k} statistics", xv.shape)));
        }
        let inv: Vec<f64> = std.iter().map(|s| 1.0 / s).collect();
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, &a)| (a - mean[i % k]) * inv[i % k])
            .collect();
        let out = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Standardize {
                x,
                inv_std: Arc::new(inv),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node. Every gradient-carrying leaf gets
    /// an entry, zero if the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        self.ensure_finite()?;
        if self.value(loss).len() != 1 {
            return Err(mismatch(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf | Op::Param) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    /// Gradient accumulator for input `v`, allocated on first use. Returns
    /// `None` when `v` does not need a gradient.
    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value.data;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (din, dout) = (wv.shape[0], wv.shape[1]);
                let rows = xv.len() / din;
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let gr = &g[r * dout..(r + 1) * dout];
                        for k in 0..din {
                            let wk = &wv.data[k * dout..(k + 1) * dout];
                            gx[r * din + k] += gr.iter().zip(wk).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for r in 0..rows {
                        let gr = &g[r * dout..(r + 1) * dout];
                        for k in 0..din {
                            let a = xv.data[r * din + k];
                            if a == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gw[k * dout..(k + 1) * dout].iter_mut().zip(gr) {
                                *o += a * gv;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for r in 0..rows {
                            for (o, &gv) in gb.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                                *o += gv;
                            }
                        }
                    }
                }
            }
            Op::SparseMatmul { m, x } => {
                let c = node.value.last_dim();
                let batch = node.value.len() / (m.rows() * c);
                if let Some(gx) = self.slot(grads, *x) {
                    for b in 0..batch {
                        m.transpose_matmul_into(
                            &g[b * m.rows() * c..(b + 1) * m.rows() * c],
                            c,
                            &mut gx[b * m.cols() * c..(b + 1) * m.cols() * c],
                        );
                    }
                }
            }
            Op::Relu(x) => self.elementwise_back(*x, g, grads, |a, _| if a > 0.0 { 1.0 } else { 0.0 }, y),
            Op::Elu(x) => self.elementwise_back(*x, g, grads, |a, out| if a > 0.0 { 1.0 } else { out + 1.0 }, y),
            Op::Exp(x) => self.elementwise_back(*x, g, grads, |_, out| out, y),
            Op::Log(x) => self.elementwise_back(*x, g, grads, |a, _| 1.0 / a, y),
            Op::Square(x) => self.elementwise_back(*x, g, grads, |a, _| 2.0 * a, y),
            Op::Abs(x) => self.elementwise_back(*x, g, grads, |a, _| a.signum() * f64::from(a != 0.0), y),
            Op::Scale(x, s) => {
                let s = *s;
                self.elementwise_back(*x, g, grads, move |_, _| s, y)
            }
            Op::AddScalar(x) => self.elementwise_back(*x, g, grads, |_, _| 1.0, y),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.elementwise_back(*x, g, grads, move |a, _| f64::from(a > lo && a < hi), y)
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, d), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *o += d * bb;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, d), aa) in gb.iter_mut().zip(g).zip(av) {
                        *o += d * aa;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::AbsSum(x) => {
                let xv = &self.value(*x).data;
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, a) in gx.iter_mut().zip(xv) {
                        *o += g[0] * a.signum() * f64::from(*a != 0.0);
                    }
                }
            }
            Op::SqSum(x) => {
                let xv = &self.value(*x).data;
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, a) in gx.iter_mut().zip(xv) {
                        *o += 2.0 * g[0] * a;
                    }
                }
            }
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for &(p, w) in parts {
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            for k in 0..w {
                                gp[r * w + k] += g[r * total + offset + k];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start, width } => {
                let d = self.value(*x).last_dim();
                let rows = g.len() / width;
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        for k in 0..*width {
                            gx[r * d + start + k] += g[r * width + k];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
            }
            Op::GatherRows { x, rows } => {
                let stride = g.len() / rows.len().max(1);
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        for k in 0..stride {
                            gx[r * stride + k] += g[i * stride + k];
                        }
                    }
                }
            }
            Op::Standardize { x, inv_std } => {
                let k = inv_std.len();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, (o, d)) in gx.iter_mut().zip(g).enumerate() {
                        *o += d * inv_std[i % k];
                    }
                }
            }
            Op::BatchNorm(rec) => nn::batch_norm_backward(self, rec, g, grads),
            Op::Conformal(rec) => geometry::conformal_backward(self, rec, g, grads),
            Op::VertexNormals(rec) => geometry::normals_backward(self, rec, y, g, grads),
        }
    }

    /// Backward for `y = f(x)` elementwise; `dfdx(x, y)` is the local slope.
    fn elementwise_back(
        &self,
        x: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        dfdx: impl Fn(f64, f64) -> f64,
        y: &[f64],
    ) {
        let xv = &self.value(x).data;
        if let Some(gx) = self.slot(grads, x) {
            for (i, o) in gx.iter_mut().enumerate() {
                *o += g[i] * dfdx(xv[i], y[i]);
            }
        }
    }
}

pub mod gradcheck {
    //! Central finite differences against the tape's reverse sweep.

    use super::*;

    /// First entry whose analytic and numeric derivatives disagree.
    #[derive(Debug, Clone, PartialEq, Error)]
    #[error("{location}: analytic {analytic}, numeric {numeric}")]
    pub struct GradientMismatch {
        pub location: String,
        pub analytic: f64,
        pub numeric: f64,
    }

    /// Compares analytic and numeric gradients of `f` at every input entry.
    ///
    /// An entry passes when `|a − n| ≤ tol · max(|a|, |n|, floor)` with
    /// `floor = 1e-3 · max_j |n_j|`, so entries that are tiny relative to
    /// the whole gradient are judged on the gradient's own scale instead of
    /// on round-off.
    pub fn check(
        inputs: &[Tensor],
        f: impl Fn(&mut Tape, &[Var]) -> Var,
        h: f64,
        tol: f64,
    ) -> Result<(), GradientMismatch> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).map_err(|e| GradientMismatch {
            location: format!("backward pass failed: {e}"),
            analytic: f64::NAN,
            numeric: f64::NAN,
        })?;
        let eval = |inputs: &[Tensor]| {
            let mut t = Tape::new();
            let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let o = f(&mut t, &v);
            t.item(o)
        };
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).expect("leaf gradient").to_vec();
            let mut numeric = vec![0.0; input.len()];
            for i in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].data[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data[i] -= h;
                numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
            compare(&analytic, &numeric, tol).map_err(|e| GradientMismatch {
                location: format!("input {k}, {}", e.location),
                ..e
            })?;
        }
        Ok(())
    }

    /// Entry-wise comparison with the floor described in [`check`].
    pub fn compare(analytic: &[f64], numeric: &[f64], tol: f64) -> Result<(), GradientMismatch> {
        let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let floor = 1e-3 * scale;
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(floor).max(1e-12);
            if (a - n).abs() / denom > tol {
                return Err(GradientMismatch {
                    location: format!("entry {i}"),
                    analytic: *a,
                    numeric: *n,
                });
            }
        }
        Ok(())
    }
}
