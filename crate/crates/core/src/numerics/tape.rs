//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and whatever the
//! adjoint rule needs. `backward` walks the nodes in reverse insertion order,
//! which is a valid reverse topological order because a node can only
//! reference nodes recorded before it.

use std::collections::HashMap;

use rand::Rng;

use super::param::{ParamId, ParamStore};
use super::tensor::{Real, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Signature of a user-supplied elementwise function or derivative.
pub type ScalarFn = fn(f64) -> f64;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Transpose(Var),
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Softmax(Var),
    Gelu(Var),
    Unary { x: Var, df: ScalarFn },
    Dropout { x: Var, mask: Vec<T> },
    Concat { parts: Vec<Var>, axis: usize },
    GatherRows { x: Var, index: Vec<usize> },
    SliceCols { x: Var, start: usize, end: usize },
    CrossEntropy { logits: Var, target: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Gelu(_) => "gelu",
            Op::Unary { .. } => "unary",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Build one per forward pass.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    perturbation: Option<(ParamId, usize, f64)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad_f64(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Tanh-approximated GELU, usable with [`Tape::unary`].
pub fn gelu(x: f64) -> f64 {
    gelu_f64(x)
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    gelu_grad_f64(x)
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ca, cb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = T::zero();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    for v in acc {
        s += v;
    }
    s
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// out[m,n] += a[m,k] * b[k,n]
fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

fn adjoint_slot<T: Real>(adj: &mut [Option<Vec<T>>], len: usize, v: Var) -> &mut Vec<T> {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn shape2(t: &Tensor<impl Real>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            perturbation: None,
        }
    }

    /// Tape whose binding of `param` gets `delta` added to one flat element.
    /// Used by finite-difference checks.
    pub fn with_perturbation(param: ParamId, index: usize, delta: f64) -> Self {
        Tape {
            perturbation: Some((param, index, delta)),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Parameters bound so far, in binding order.
    pub fn bound_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<(usize, ParamId)> = self.bound.iter().map(|(p, v)| (v.0, *p)).collect();
        ids.sort();
        ids.into_iter().map(|(_, p)| p).collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant input (no gradient is propagated into it).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input whose adjoint should be available after `backward`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter. Repeated bindings of the same parameter return the
    /// same node, so its adjoint accumulates over every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let mut value: Tensor<T> = store.value(id).cast();
        if let Some((pid, idx, delta)) = self.perturbation {
            if pid == id {
                let x = &mut value.data_mut()[idx];
                *x = T::of_f64(x.as_f64() + delta);
            }
        }
        self.nodes.push(Node {
            value,
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var, TensorError> {
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, x: Var, row: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var, TensorError> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.len() != tx.cols() {
            return Err(TensorError::ShapeMismatch {
                op: op.name(),
                lhs: tx.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let c = tx.cols();
        let r = tr.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| f(v, r[i % c])).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(row);
        self.push(out, op, ng)
    }

    /// Adds a row vector (length = last axis) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast(x, row, Op::AddRow(x, row), |a, b| a + b)
    }

    /// Multiplies every row of `x` elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        self.row_broadcast(x, row, Op::MulRow(x, row), |a, b| a * b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let f = T::of_f64(factor);
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v * f).collect())?;
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, f), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: tx.shape().to_vec(),
                reason: "rank-2 input required".into(),
            });
        }
        let (r, c) = shape2(tx);
        let src = tx.data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x), ng)
    }

    /// Mean over one axis of a rank-2 tensor, keeping the axis with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.rank() != 2 || axis > 1 {
            return Err(TensorError::InvalidShape {
                op: "mean_axis",
                shape: tx.shape().to_vec(),
                reason: format!("rank-2 input and axis < 2 required, got axis {axis}"),
            });
        }
        let (r, c) = shape2(tx);
        let src = tx.data();
        let (shape, data) = if axis == 0 {
            let data = (0..c)
                .map(|j| T::of_f64((0..r).map(|i| src[i * c + j].as_f64()).sum::<f64>() / r as f64))
                .collect();
            (vec![1, c], data)
        } else {
            let data = (0..r)
                .map(|i| T::of_f64(src[i * c..(i + 1) * c].iter().map(|v| v.as_f64()).sum::<f64>() / c as f64))
                .collect();
            (vec![r, 1], data)
        };
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data)?, Op::MeanAxis { x, axis }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).sum_f64();
        let ng = self.ng(x);
        self.push(Tensor::scalar(T::of_f64(s)), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).mean_f64();
        let ng = self.ng(x);
        self.push(Tensor::scalar(T::of_f64(s)), Op::Mean(x), ng)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = Vec::with_capacity(tx.len());
        let mut rstds = Vec::with_capacity(tx.rows());
        for row in tx.data().chunks(c) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            data.extend(row.iter().map(|v| T::of_f64((v.as_f64() - mean) * rstd)));
            rstds.push(T::of_f64(rstd));
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, rstd: rstds }, ng)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(c) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: f64 = exps.iter().map(|v| v.as_f64()).sum();
            let inv = T::of_f64(1.0 / total);
            data.extend(exps.into_iter().map(|e| e * inv));
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| T::of_f64(gelu_f64(v.as_f64()))).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Elementwise function with a caller-supplied derivative.
    pub fn unary(&mut self, x: Var, f: ScalarFn, df: ScalarFn) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| T::of_f64(f(v.as_f64()))).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        self.push(out, Op::Unary { x, df }, ng)
    }

    /// Inverted dropout. `rng == None` (evaluation) returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                reason: format!("drop probability {p} outside [0, 1)"),
            });
        }
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of_f64(1.0 / (1.0 - p));
        let tx = self.value(x);
        let mask: Vec<T> = (0..tx.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Concatenation of rank-2 tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 2 || axis > 1 {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: s0,
                reason: format!("rank-2 inputs and axis < 2 required, got axis {axis}"),
            });
        }
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1 - axis] != s0[1 - axis] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: s0,
                    rhs: s.to_vec(),
                });
            }
        }
        let (shape, data) = if axis == 0 {
            let rows: usize = parts.iter().map(|&p| self.shape(p)[0]).sum();
            let mut data = Vec::with_capacity(rows * s0[1]);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            (vec![rows, s0[1]], data)
        } else {
            let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
            let r = s0[0];
            let mut data = Vec::with_capacity(r * cols);
            for i in 0..r {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            (vec![r, cols], data)
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Selects rows of a rank-2 tensor (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.rank() != 2 || index.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: tx.shape().to_vec(),
                reason: "rank-2 input and a non-empty index required".into(),
            });
        }
        let (r, c) = shape2(tx);
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: r,
                });
            }
            data.extend_from_slice(tx.row(i));
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![index.len(), c], data)?,
            Op::GatherRows { x, index: index.to_vec() },
            ng,
        )
    }

    /// Column range `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.rank() != 2 || start >= end || end > tx.cols() {
            return Err(TensorError::InvalidShape {
                op: "slice_cols",
                shape: tx.shape().to_vec(),
                reason: format!("invalid column range {start}..{end}"),
            });
        }
        let (r, _) = shape2(tx);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&tx.row(i)[start..end]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![r, end - start], data)?, Op::SliceCols { x, start, end }, ng)
    }

    /// Softmax cross-entropy of a single logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, TensorError> {
        let t = self.value(logits);
        if t.rows() != 1 {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape: t.shape().to_vec(),
                reason: "a single row of logits required".into(),
            });
        }
        if target >= t.cols() {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                extent: t.cols(),
            });
        }
        let row: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(T::of_f64(lse - row[target])),
            Op::CrossEntropy { logits, target },
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            visited += 1;
            self.propagate(node, &g, &mut adj);
            adj[i] = Some(g);
        }
        let params = self.bound.iter().map(|(&p, &v)| (p, v.0)).collect();
        Ok(Gradients {
            adjoints: adj,
            params,
            visited,
        })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        macro_rules! slot {
            ($v:expr) => {
                adjoint_slot(adj, self.nodes[$v.0].value.len(), $v)
            };
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if ng(*a) {
                    let da = slot!(*a);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] += dot(grow, &tb.data()[p * n..(p + 1) * n]);
                        }
                    }
                }
                if ng(*b) {
                    let db = slot!(*b);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av != T::zero() {
                                axpy(av, grow, &mut db[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if ng(v) {
                        axpy(sign, g, slot!(v));
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if ng(v) {
                        axpy(sign, g, slot!(v));
                    }
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    let da = slot!(*a);
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(val(*b).data()) {
                        *d += gi * bi;
                    }
                }
                if ng(*b) {
                    let db = slot!(*b);
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(val(*a).data()) {
                        *d += gi * ai;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if ng(*x) {
                    axpy(T::one(), g, slot!(*x));
                }
                if ng(*row) {
                    let dr = slot!(*row);
                    let c = dr.len();
                    for grow in g.chunks(c) {
                        axpy(T::one(), grow, dr);
                    }
                }
            }
            Op::MulRow(x, row) => {
                let r = val(*row).data();
                let c = r.len();
                if ng(*x) {
                    let dx = slot!(*x);
                    for (i, (d, &gi)) in dx.iter_mut().zip(g).enumerate() {
                        *d += gi * r[i % c];
                    }
                }
                if ng(*row) {
                    let dr = slot!(*row);
                    let xs = val(*x).data();
                    for (i, (&gi, &xi)) in g.iter().zip(xs).enumerate() {
                        dr[i % c] += gi * xi;
                    }
                }
            }
            Op::Scale(x, f) => {
                if ng(*x) {
                    axpy(*f, g, slot!(*x));
                }
            }
            Op::Reshape(x) => {
                if ng(*x) {
                    axpy(T::one(), g, slot!(*x));
                }
            }
            Op::Transpose(x) => {
                if ng(*x) {
                    let (r, c) = shape2(val(*x));
                    let dx = slot!(*x);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                if ng(*x) {
                    let (r, c) = shape2(val(*x));
                    let dx = slot!(*x);
                    if *axis == 0 {
                        let inv = T::of_f64(1.0 / r as f64);
                        for drow in dx.chunks_mut(c) {
                            axpy(inv, g, drow);
                        }
                    } else {
                        let inv = T::of_f64(1.0 / c as f64);
                        for (i, drow) in dx.chunks_mut(c).enumerate() {
                            let gi = g[i] * inv;
                            drow.iter_mut().for_each(|d| *d += gi);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if ng(*x) {
                    let g0 = g[0];
                    slot!(*x).iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Mean(x) => {
                if ng(*x) {
                    let dx = slot!(*x);
                    let gi = g[0] * T::of_f64(1.0 / dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d += gi);
                }
            }
            Op::LayerNorm { x, rstd } => {
                if ng(*x) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let dx = slot!(*x);
                    let inv_c = 1.0 / c as f64;
                    for (r, ((drow, grow), yrow)) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).enumerate() {
                        let mg: f64 = grow.iter().map(|v| v.as_f64()).sum::<f64>() * inv_c;
                        let mgy: f64 = grow.iter().zip(yrow).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() * inv_c;
                        let s = rstd[r].as_f64();
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += T::of_f64(s * (gi.as_f64() - mg - yi.as_f64() * mgy));
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if ng(*x) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let dx = slot!(*x);
                    for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s = dot(grow, yrow);
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - s);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if ng(*x) {
                    let xs = val(*x).data();
                    let dx = slot!(*x);
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xs) {
                        *d += gi * T::of_f64(gelu_grad_f64(xi.as_f64()));
                    }
                }
            }
            Op::Unary { x, df } => {
                if ng(*x) {
                    let xs = val(*x).data();
                    let dx = slot!(*x);
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xs) {
                        *d += gi * T::of_f64(df(xi.as_f64()));
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if ng(*x) {
                    let dx = slot!(*x);
                    for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).len();
                        if ng(p) {
                            axpy(T::one(), &g[offset..offset + len], slot!(p));
                        }
                        offset += len;
                    }
                } else {
                    let total = node.value.cols();
                    let mut col = 0;
                    for &p in parts {
                        let (r, c) = shape2(val(p));
                        if ng(p) {
                            let dp = slot!(p);
                            for i in 0..r {
                                axpy(T::one(), &g[i * total + col..i * total + col + c], &mut dp[i * c..(i + 1) * c]);
                            }
                        }
                        col += c;
                    }
                }
            }
            Op::GatherRows { x, index } => {
                if ng(*x) {
                    let c = val(*x).cols();
                    let dx = slot!(*x);
                    for (k, &i) in index.iter().enumerate() {
                        axpy(T::one(), &g[k * c..(k + 1) * c], &mut dx[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::SliceCols { x, start, end } => {
                if ng(*x) {
                    let c = val(*x).cols();
                    let w = end - start;
                    let dx = slot!(*x);
                    for (i, grow) in g.chunks(w).enumerate() {
                        axpy(T::one(), grow, &mut dx[i * c + start..i * c + end]);
                    }
                }
            }
            Op::CrossEntropy { logits, target } => {
                if ng(*logits) {
                    let row: Vec<f64> = val(*logits).data().iter().map(|v| v.as_f64()).collect();
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let g0 = g[0].as_f64();
                    let dl = slot!(*logits);
                    for (j, d) in dl.iter_mut().enumerate() {
                        let p = (row[j] - max).exp() / z;
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *d += T::of_f64(g0 * (p - onehot));
                    }
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    adjoints: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    /// Adjoint of any recorded node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.adjoints[v.0].as_deref()
    }

    pub fn for_param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.adjoints[*n].as_deref())
    }

    /// Number of nodes whose adjoint rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }

    /// Drops every non-parameter adjoint, keeping `(param, gradient)` pairs in
    /// binding order. Parameters the loss does not reach are omitted.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Vec<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.adjoints[node].take().map(|g| (id, g)))
            .collect()
    }

    /// Adds `scale * gradient` into each bound parameter's `grad` buffer.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.adjoints[node] {
                let dst = store.get_mut(id).grad.data_mut();
                for (d, &gi) in dst.iter_mut().zip(g) {
                    *d = (f64::from(*d) + scale * gi.as_f64()) as f32;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(a).data());
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 5], 3.25));
        let y = tape.layer_norm(x, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_of_weighted_sum_is_weight() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(t(&[3], &[0.5, -2.0, 4.0]));
        let x = tape.input(t(&[3], &[1.0, 1.0, 1.0]));
        let p = tape.mul(w, x).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[0.5, -2.0, 4.0]);
        assert!(g.wrt(w).is_none());
    }

    #[test]
    fn grad_of_mean() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[4, 2]));
        let l = tape.mean(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(x).unwrap().iter().all(|&v| v == 0.125));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]));
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.scale(x, 5.0).unwrap();
        let s = tape.add(a, b).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[8.0, 8.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_visits_each_op_once() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[1, 3], &[0.1, 0.2, 0.3]));
        let a = tape.softmax(x).unwrap();
        let b = tape.gelu(a).unwrap();
        let c = tape.add(a, b).unwrap();
        let l = tape.sum(c).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.visited(), tape.len());
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 2], |i| i as f32));
        let y = tape.dropout::<rand_chacha::ChaCha8Rng>(x, 0.5, None).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_train_scales_kept() {
        let mut rng = crate::numerics::rng::SeedKey::new(3).rng();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 64], 1.0));
        let y = tape.dropout(x, 0.5, Some(&mut rng)).unwrap();
        let vals = tape.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(vals.contains(&0.0) && vals.contains(&2.0));
    }

    #[test]
    fn non_finite_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1], f32::MAX));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "scale" });
    }

    #[test]
    fn param_binding_is_shared() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[2], 1.0));
        let mut tape = Tape::<f32>::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let l = tape.sum(s).unwrap();
        tape.backward(l).unwrap().accumulate_into(&mut store, 1.0);
        assert_eq!(store.get(id).grad.data(), &[2.0, 2.0]);
    }
}
