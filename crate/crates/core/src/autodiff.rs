//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Every backward rule is written in terms of the same primitive set used for
//! the forward pass, so the gradients returned by [`grad`] with
//! `build_graph = true` are ordinary differentiable tensors. Differentiating
//! them again gives Hessian-vector products (backward-on-backward).
//!
//! Tensors are immutable and reference counted; a graph is just the set of
//! nodes reachable from an output through `parents`. Node ids are drawn from a
//! global monotone counter, so sorting by id is a topological order and the
//! reverse sweep always accumulates contributions in the same order.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{DtlError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Add(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Relu(Tensor),
    Exp(Tensor),
    Powf(Tensor, f64),
    LogSoftmax(Tensor),
    RowSumBroadcast(Tensor),
    SumRows(Tensor),
    BroadcastRows(Tensor),
    Gather(Tensor, Arc<[usize]>),
    Scatter(Tensor, Arc<[usize]>),
    Sum(Tensor),
    Fill(Tensor),
    Dot(Tensor, Tensor),
    Reshape(Tensor),
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Mul(a, b) | Dot(a, b) => vec![a, b],
            Transpose(a)
            | Scale(a, _)
            | Relu(a)
            | Exp(a)
            | Powf(a, _)
            | LogSoftmax(a)
            | RowSumBroadcast(a)
            | SumRows(a)
            | BroadcastRows(a)
            | Gather(a, _)
            | Scatter(a, _)
            | Sum(a)
            | Fill(a)
            | Reshape(a) => vec![a],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            MatMul(..) => "matmul",
            Transpose(..) => "transpose",
            Add(..) => "add",
            Mul(..) => "mul",
            Scale(..) => "scale",
            Relu(..) => "relu",
            Exp(..) => "exp",
            Powf(..) => "powf",
            LogSoftmax(..) => "log_softmax",
            RowSumBroadcast(..) => "row_sum_broadcast",
            SumRows(..) => "sum_rows",
            BroadcastRows(..) => "broadcast_rows",
            Gather(..) => "gather",
            Scatter(..) => "scatter",
            Sum(..) => "sum",
            Fill(..) => "fill",
            Dot(..) => "dot",
            Reshape(..) => "reshape",
        }
    }
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Arc<[f64]>,
    op: Op,
    requires_grad: bool,
}

/// Handle to an immutable node of a differentiation graph.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("op", &self.0.op.name())
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn shape_err(op: &str, msg: impl fmt::Display) -> DtlError {
    DtlError::InvalidShape(format!("{op}: {msg}"))
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        // Results that cannot carry gradient are stored as plain constants so
        // no graph is retained behind them.
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data: data.into(),
            op,
            requires_grad,
        }))
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if data.len() != numel(&shape) {
            return Err(shape_err(
                "leaf",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data: data.into(),
            op: Op::Leaf,
            requires_grad,
        })))
    }

    /// A trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(shape.to_vec(), data, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(shape.to_vec(), data, false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::leaf(vec![], vec![v], false).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::leaf(shape.to_vec(), vec![0.0; numel(shape)], false).expect("zeros shape")
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::leaf(shape.to_vec(), vec![1.0; numel(shape)], false).expect("ones shape")
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op.name()
    }

    /// Parent nodes this tensor was computed from (empty for leaves).
    pub fn parents(&self) -> Vec<Tensor> {
        self.0.op.parents().into_iter().cloned().collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// A constant leaf sharing this tensor's values; gradient stops here.
    pub fn detach(&self) -> Tensor {
        Tensor(Arc::new(Node {
            id: next_id(),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            op: Op::Leaf,
            requires_grad: false,
        }))
    }

    fn rows_cols(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data().iter().map(|&x| f(x)).collect()
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect()
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = rhs.rows_cols("matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(Self::make(
            vec![m, n],
            out,
            Op::MatMul(self.clone(), rhs.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.rows_cols("transpose")?;
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        Ok(Self::make(vec![n, m], out, Op::Transpose(self.clone())))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "add")?;
        let out = self.zip(rhs, |a, b| a + b);
        Ok(Self::make(
            self.shape().to_vec(),
            out,
            Op::Add(self.clone(), rhs.clone()),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.add(&rhs.scale(-1.0))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "mul")?;
        let out = self.zip(rhs, |a, b| a * b);
        Ok(Self::make(
            self.shape().to_vec(),
            out,
            Op::Mul(self.clone(), rhs.clone()),
        ))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.map(|x| c * x);
        Self::make(self.shape().to_vec(), out, Op::Scale(self.clone(), c))
    }

    pub fn relu(&self) -> Tensor {
        let out = self.map(|x| if x > 0.0 { x } else { 0.0 });
        Self::make(self.shape().to_vec(), out, Op::Relu(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        let out = self.map(f64::exp);
        Self::make(self.shape().to_vec(), out, Op::Exp(self.clone()))
    }

    /// Elementwise power `x^p`.
    pub fn powf(&self, p: f64) -> Tensor {
        let out = self.map(|x| x.powf(p));
        Self::make(self.shape().to_vec(), out, Op::Powf(self.clone(), p))
    }

    /// Row-wise `x - log(sum(exp(x)))`, stabilized by the row maximum.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let (m, n) = self.rows_cols("log_softmax")?;
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &a[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        Ok(Self::make(vec![m, n], out, Op::LogSoftmax(self.clone())))
    }

    pub fn softmax(&self) -> Result<Tensor> {
        Ok(self.log_softmax()?.exp())
    }

    /// Replaces every entry of a matrix by the sum of its row.
    pub fn row_sum_broadcast(&self) -> Result<Tensor> {
        let (m, n) = self.rows_cols("row_sum_broadcast")?;
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let s: f64 = a[i * n..(i + 1) * n].iter().sum();
            out[i * n..(i + 1) * n].fill(s);
        }
        Ok(Self::make(vec![m, n], out, Op::RowSumBroadcast(self.clone())))
    }

    /// Column sums of an `m x n` matrix, shape `[n]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (m, n) = self.rows_cols("sum_rows")?;
        let a = self.data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&a[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        Ok(Self::make(vec![n], out, Op::SumRows(self.clone())))
    }

    /// Repeats a vector of shape `[n]` as the `m` rows of a matrix.
    pub fn broadcast_rows(&self, m: usize) -> Result<Tensor> {
        let n = match self.shape() {
            [n] => *n,
            s => return Err(shape_err("broadcast_rows", format!("expected a vector, got {s:?}"))),
        };
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.data());
        }
        Ok(Self::make(vec![m, n], out, Op::BroadcastRows(self.clone())))
    }

    /// `x + b` with `b` of shape `[n]` broadcast over the rows of `x`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.rows_cols("add_bias")?;
        if bias.shape() != [n] {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", self.shape(), bias.shape()),
            ));
        }
        self.add(&bias.broadcast_rows(m)?)
    }

    /// Picks `x[i, idx[i]]` for every row, shape `[m]`.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor> {
        let (m, n) = self.rows_cols("gather")?;
        if idx.len() != m {
            return Err(shape_err("gather", format!("{} indices for {m} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(shape_err("gather", format!("index {bad} out of range {n}")));
        }
        let a = self.data();
        let out = idx.iter().enumerate().map(|(i, &j)| a[i * n + j]).collect();
        Ok(Self::make(vec![m], out, Op::Gather(self.clone(), idx.into())))
    }

    fn scatter(&self, idx: Arc<[usize]>, n: usize) -> Tensor {
        let m = idx.len();
        let mut out = vec![0.0; m * n];
        for (i, &j) in idx.iter().enumerate() {
            out[i * n + j] = self.data()[i];
        }
        Self::make(vec![m, n], out, Op::Scatter(self.clone(), idx))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Self::make(vec![], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn fill(&self, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != 1 {
            return Err(shape_err("fill", format!("source shape {:?}", self.shape())));
        }
        let v = self.data()[0];
        Ok(Self::make(
            shape.to_vec(),
            vec![v; numel(shape)],
            Op::Fill(self.clone()),
        ))
    }

    /// Inner product of the flattened values; shapes may differ if sizes agree.
    pub fn dot(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.numel() != rhs.numel() {
            return Err(shape_err(
                "dot",
                format!("{:?} . {:?}", self.shape(), rhs.shape()),
            ));
        }
        let s = self.data().iter().zip(rhs.data()).map(|(a, b)| a * b).sum();
        Ok(Self::make(vec![], vec![s], Op::Dot(self.clone(), rhs.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(Self::make(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Product of a tensor with a one-element tensor.
    pub fn mul_scalar(&self, s: &Tensor) -> Result<Tensor> {
        self.mul(&s.fill(self.shape())?)
    }

    /// Adjoint contributions `(parent, d out / d parent applied to g)`.
    fn backward(&self, g: &Tensor, build: bool) -> Vec<(Tensor, Tensor)> {
        use Op::*;
        let keep = |t: &Tensor| if build { t.clone() } else { t.detach() };
        let me = keep(self);
        let e = "backward rule shapes are consistent";
        let mut out = Vec::with_capacity(2);
        let mut push = |p: &Tensor, f: &dyn Fn() -> Tensor| {
            if p.requires_grad() {
                out.push((p.clone(), f()));
            }
        };
        match &self.0.op {
            Leaf => {}
            MatMul(a, b) => {
                push(a, &|| g.matmul(&keep(b).transpose().expect(e)).expect(e));
                push(b, &|| keep(a).transpose().expect(e).matmul(g).expect(e));
            }
            Transpose(a) => push(a, &|| g.transpose().expect(e)),
            Add(a, b) => {
                push(a, &|| g.clone());
                push(b, &|| g.clone());
            }
            Mul(a, b) => {
                push(a, &|| g.mul(&keep(b)).expect(e));
                push(b, &|| g.mul(&keep(a)).expect(e));
            }
            Scale(a, c) => push(a, &|| g.scale(*c)),
            Relu(a) => push(a, &|| {
                let mask = a.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = Tensor::constant(mask, a.shape()).expect(e);
                g.mul(&mask).expect(e)
            }),
            Exp(a) => push(a, &|| g.mul(&me).expect(e)),
            Powf(a, p) => push(a, &|| {
                let d = keep(a).powf(p - 1.0).scale(*p);
                g.mul(&d).expect(e)
            }),
            LogSoftmax(a) => push(a, &|| {
                let probs = me.exp();
                let rs = g.row_sum_broadcast().expect(e);
                g.sub(&probs.mul(&rs).expect(e)).expect(e)
            }),
            RowSumBroadcast(a) => push(a, &|| g.row_sum_broadcast().expect(e)),
            SumRows(a) => push(a, &|| g.broadcast_rows(a.shape()[0]).expect(e)),
            BroadcastRows(a) => push(a, &|| g.sum_rows().expect(e)),
            Gather(a, idx) => push(a, &|| g.scatter(Arc::clone(idx), a.shape()[1])),
            Scatter(a, idx) => push(a, &|| g.gather(idx).expect(e)),
            Sum(a) => push(a, &|| g.fill(a.shape()).expect(e)),
            Fill(a) => push(a, &|| g.sum().reshape(a.shape()).expect(e)),
            Dot(a, b) => {
                push(a, &|| {
                    let bb = keep(b).reshape(a.shape()).expect(e);
                    bb.mul(&g.fill(a.shape()).expect(e)).expect(e)
                });
                push(b, &|| {
                    let aa = keep(a).reshape(b.shape()).expect(e);
                    aa.mul(&g.fill(b.shape()).expect(e)).expect(e)
                });
            }
            Reshape(a) => push(a, &|| g.reshape(a.shape()).expect(e)),
        }
        out
    }
}

/// Gradients of a scalar with respect to a list of parameter leaves, in the
/// order the leaves were given.
#[derive(Clone, Debug)]
pub struct GradientMap {
    keys: Vec<u64>,
    grads: Vec<Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        self.keys
            .iter()
            .position(|&k| k == leaf.id())
            .map(|i| &self.grads[i])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Concatenated gradient values in leaf order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grads.iter().map(Tensor::numel).sum());
        for g in &self.grads {
            out.extend_from_slice(g.data());
        }
        out
    }

    /// `sum_i <grad_i, v_i>` as a differentiable scalar; `v` is flat and treated
    /// as a constant.
    pub fn dot_flat(&self, v: &[f64]) -> Result<Tensor> {
        let total: usize = self.grads.iter().map(Tensor::numel).sum();
        if v.len() != total {
            return Err(shape_err("dot_flat", format!("{} values for {total} parameters", v.len())));
        }
        let mut acc: Option<Tensor> = None;
        let mut off = 0;
        for g in &self.grads {
            let n = g.numel();
            let c = Tensor::constant(v[off..off + n].to_vec(), g.shape())?;
            off += n;
            let d = g.dot(&c)?;
            acc = Some(match acc {
                None => d,
                Some(s) => s.add(&d)?,
            });
        }
        Ok(acc.unwrap_or_else(|| Tensor::scalar(0.0)))
    }
}

/// Derivative of a scalar `output` with respect to each tensor in `wrt`.
///
/// Leaves that `output` does not depend on get explicit zero gradients. With
/// `build_graph` set, the returned tensors record their own derivation and can
/// be differentiated again.
pub fn grad(output: &Tensor, wrt: &[Tensor], build_graph: bool) -> Result<GradientMap> {
    if output.numel() != 1 {
        return Err(DtlError::ContractViolation(format!(
            "grad of non-scalar output with shape {:?}",
            output.shape()
        )));
    }
    for w in wrt {
        if !w.is_leaf() || !w.requires_grad() {
            return Err(DtlError::ContractViolation(
                "grad wrt must be trainable leaves".into(),
            ));
        }
    }

    let mut order: Vec<Tensor> = Vec::new();
    if output.requires_grad() {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![output.clone()];
        seen.insert(output.id());
        while let Some(t) = stack.pop() {
            for p in t.0.op.parents() {
                if p.requires_grad() && seen.insert(p.id()) {
                    stack.push(p.clone());
                }
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.id().cmp(&a.id()));
    }

    let mut adjoint: HashMap<u64, Tensor> = HashMap::new();
    if !order.is_empty() {
        adjoint.insert(output.id(), Tensor::ones(output.shape()));
    }
    for node in &order {
        if node.is_leaf() {
            continue;
        }
        let Some(g) = adjoint.remove(&node.id()) else {
            continue;
        };
        for (parent, contrib) in node.backward(&g, build_graph) {
            let entry = match adjoint.remove(&parent.id()) {
                None => contrib,
                Some(prev) => prev.add(&contrib)?,
            };
            adjoint.insert(parent.id(), entry);
        }
    }

    let grads = wrt
        .iter()
        .map(|w| match adjoint.get(&w.id()) {
            Some(g) if build_graph => g.clone(),
            Some(g) => g.detach(),
            None => Tensor::zeros(w.shape()),
        })
        .collect();
    Ok(GradientMap {
        keys: wrt.iter().map(Tensor::id).collect(),
        grads,
    })
}

/// Hessian-vector product given gradients built with `build_graph = true`:
/// differentiates `<grads, detach(v)>` once more.
pub fn hvp_from_grads(grads: &GradientMap, params: &[Tensor], v: &[f64]) -> Result<Vec<f64>> {
    let s = grads.dot_flat(v)?;
    Ok(grad(&s, params, false)?.flatten())
}

/// `∇²loss · v` by backward-on-backward.
pub fn hvp(loss: &Tensor, params: &[Tensor], v: &[f64]) -> Result<Vec<f64>> {
    let total: usize = params.iter().map(Tensor::numel).sum();
    if v.len() != total {
        return Err(shape_err("hvp", format!("{} values for {total} parameters", v.len())));
    }
    let g = grad(loss, params, true)?;
    hvp_from_grads(&g, params, v)
}

/// Splits a flat vector into constant tensors shaped like `like`.
pub fn unflatten(flat: &[f64], like: &[Tensor]) -> Result<Vec<Tensor>> {
    let total: usize = like.iter().map(Tensor::numel).sum();
    if flat.len() != total {
        return Err(shape_err("unflatten", format!("{} values for {total}", flat.len())));
    }
    let mut off = 0;
    like.iter()
        .map(|t| {
            let n = t.numel();
            let c = Tensor::constant(flat[off..off + n].to_vec(), t.shape());
            off += n;
            c
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn dot_of_ones() {
        let g = Tensor::ones(&[4]);
        assert_eq!(g.dot(&g).unwrap().item(), 4.0);
    }

    #[test]
    fn relu_values() {
        let x = Tensor::constant(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_shape() {
        let a = Tensor::ones(&[2, 3]);
        let b = Tensor::ones(&[3, 1]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = Tensor::ones(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(DtlError::InvalidShape(_))));
        assert!(matches!(a.add(&Tensor::ones(&[3, 2])), Err(DtlError::InvalidShape(_))));
        assert!(a.dot(&Tensor::ones(&[5])).is_err());
        assert!(a.gather(&[0, 3]).is_err());
    }

    #[test]
    fn grad_of_squared_norm() {
        let w = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let out = w.dot(&w).unwrap();
        let g = grad(&out, std::slice::from_ref(&w), false).unwrap();
        assert_eq!(g.tensors()[0].data(), &[2.0, 4.0, 6.0]);
        assert_eq!(g.get(&w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let c = Tensor::scalar(5.0);
        let g = grad(&c, &[w], false).unwrap();
        assert_eq!(g.tensors()[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_requires_scalar() {
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = w.scale(2.0);
        assert!(matches!(grad(&y, &[w], false), Err(DtlError::ContractViolation(_))));
    }

    #[test]
    fn hvp_quadratic() {
        // 0.5 * θᵀAθ with A = diag(2, 4)
        let th = Tensor::param(vec![0.3, -0.7], &[2]).unwrap();
        let a = Tensor::constant(vec![2.0, 4.0], &[2]).unwrap();
        let loss = th.mul(&a).unwrap().dot(&th).unwrap().scale(0.5);
        let hv = hvp(&loss, std::slice::from_ref(&th), &[1.0, 1.0]).unwrap();
        assert!(close(&hv, &[2.0, 4.0], 1e-14));
        let zero = hvp(&loss, std::slice::from_ref(&th), &[0.0, 0.0]).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        assert!(matches!(hvp(&loss, &[th], &[1.0]), Err(DtlError::InvalidShape(_))));
    }

    #[test]
    fn detach_blocks_gradient_and_keeps_values() {
        let w = Tensor::param(vec![1.5, -2.0], &[2]).unwrap();
        let d = w.detach();
        assert_eq!(d.data(), w.data());
        assert!(!d.requires_grad());
        let out = d.dot(&d).unwrap();
        let g = grad(&out, &[w], false).unwrap();
        assert_eq!(g.flatten(), vec![0.0, 0.0]);
    }

    #[test]
    fn one_sided_detach_halves_the_quadratic_gradient() {
        let w = Tensor::param(vec![1.0, 3.0], &[2]).unwrap();
        let out = w.dot(&w.detach()).unwrap();
        let g = grad(&out, &[w], false).unwrap();
        assert_eq!(g.flatten(), vec![1.0, 3.0]);
    }

    #[test]
    fn non_build_grads_hold_no_graph() {
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let out = w.mul(&w).unwrap().sum();
        let g = grad(&out, std::slice::from_ref(&w), false).unwrap();
        assert!(!g.tensors()[0].requires_grad());
        let g2 = grad(&out, &[w], true).unwrap();
        assert!(g2.tensors()[0].requires_grad());
    }

    #[test]
    fn repeated_grads_are_bitwise_identical() {
        let x = Tensor::constant((0..12).map(|i| (i as f64 * 0.37).sin()).collect(), &[4, 3])
            .unwrap();
        let w = Tensor::param((0..6).map(|i| (i as f64 * 0.91).cos()).collect(), &[3, 2]).unwrap();
        let run = || {
            let y = x.matmul(&w).unwrap().relu().log_softmax().unwrap();
            let l = y.gather(&[0, 1, 1, 0]).unwrap().mean().scale(-1.0);
            grad(&l, std::slice::from_ref(&w), false).unwrap().flatten()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
