//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Calling [`Graph::backward`] on a 1×1 node walks the tape in reverse and
//! returns gradients for every node that depends on a parameter.

use std::collections::HashMap;

use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable parameters. Names follow a path-like scheme such as
/// `customer/encoder/forward/weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    lookup: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), lookup: HashMap::new() }
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix<T>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<T>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    MeanRows(Var),
    RepeatRows(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of operations bound to one parameter store.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    param_nodes: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for each parameter, indexed by [`ParamId`]; `None` when the
    /// parameter did not take part in the computation.
    pub fn into_param_grads(mut self) -> Vec<Option<Matrix<T>>> {
        self.param_nodes.iter().map(|v| v.and_then(|v| self.grads[v.0].take())).collect()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, param_vars: vec![None; params.len()], nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on a non-scalar node");
        m.data()[0]
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, value: Matrix<T>, op: Op<T>) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix<T>, op: Op<T>) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients, for tests that differentiate with
    /// respect to inputs rather than parameters.
    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.binary(a, b, value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.binary(a, b, value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(a, b, value, Op::Add(a, b))
    }

    /// Adds a 1×c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..n {
            for (o, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *o = *o + b;
            }
        }
        self.binary(a, row, value, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(a, b, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, value, Op::Mul(a, b))
    }

    /// Multiplies every row of `a` elementwise by a 1×c row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (n, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row expects a 1x{c} row");
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..n {
            for (o, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *o = *o * b;
            }
        }
        self.binary(a, row, value, Op::MulRow(a, row))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.binary(a, b, value, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.unary(a, value, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.unary(a, value, Op::Shift(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.unary(a, value, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::exp);
        self.unary(a, value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::ln);
        self.unary(a, value, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::sqrt);
        self.unary(a, value, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.unary(a, value, Op::Relu(a))
    }

    /// Row-wise softmax. `allowed` (row-major, same shape as `a`) marks the
    /// entries that may receive probability; the rest are exactly zero.
    pub fn softmax_rows(&mut self, a: Var, allowed: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let (n, c) = x.shape();
        if let Some(m) = allowed {
            assert_eq!(m.len(), n * c, "softmax mask shape mismatch");
        }
        let mut value = Matrix::zeros(n, c);
        for i in 0..n {
            let mask = allowed.map(|m| &m[i * c..(i + 1) * c]);
            crate::tensor::softmax_into(x.row(i), mask, value.row_mut(i));
        }
        self.unary(a, value, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, c) = x.shape();
        let mut value = Matrix::zeros(n, c);
        for i in 0..n {
            let row = x.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (o, &v) in value.row_mut(i).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.unary(a, value, Op::LogSoftmax(a))
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)` without gain or bias.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let (n, c) = x.shape();
        let cn = T::from_usize(c).unwrap();
        let mut value = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let s = T::one() / (var + eps).sqrt();
            for (o, &v) in value.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            inv_std.push(s);
        }
        self.unary(a, value, Op::LayerNorm(a, inv_std))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let n = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(n, total);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), n, "concat_cols row mismatch");
            for i in 0..n {
                value.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), c, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            n += m.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Matrix::from_vec(n, c, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let x = self.value(a);
        assert!(start + width <= x.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(x.rows(), width);
        for i in 0..x.rows() {
            value.row_mut(i).copy_from_slice(&x.row(i)[start..start + width]);
        }
        self.unary(a, value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let x = self.value(a);
        assert!(start + count <= x.rows(), "slice_rows out of range");
        let c = x.cols();
        let value = Matrix::from_vec(count, c, x.data()[start * c..(start + count) * c].to_vec());
        self.unary(a, value, Op::SliceRows(a, start))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, 1)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.unary(a, value, Op::Transpose(a))
    }

    /// Rows of `table` selected by `indices` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            assert!(i < t.rows(), "gather_rows index {i} out of range");
            data.extend_from_slice(t.row(i));
        }
        let value = Matrix::from_vec(indices.len(), c, data);
        self.unary(table, value, Op::GatherRows(table, indices.to_vec()))
    }

    /// Entries at `(row, col)` positions as an n×1 column.
    pub fn pick(&mut self, a: Var, positions: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let data = positions.iter().map(|&(r, c)| x.get(r, c)).collect();
        let value = Matrix::from_vec(positions.len(), 1, data);
        self.unary(a, value, Op::Pick(a, positions.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        self.unary(a, value, Op::Sum(a))
    }

    /// Column means: n×c → 1×c.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, c) = x.shape();
        assert!(n > 0, "mean_rows of an empty matrix");
        let inv = T::one() / T::from_usize(n).unwrap();
        let mut out = vec![T::zero(); c];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(x.row(i)) {
                *o = *o + v;
            }
        }
        for o in &mut out {
            *o = *o * inv;
        }
        self.unary(a, Matrix::row_vector(out), Op::MeanRows(a))
    }

    /// Repeats a 1×c row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), 1, "repeat_rows expects a row vector");
        let mut data = Vec::with_capacity(n * x.cols());
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let value = Matrix::from_vec(n, x.cols(), data);
        self.unary(a, value, Op::RepeatRows(a))
    }

    /// Reverse pass from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar node");
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads, param_nodes: self.param_vars.clone() }
    }

    fn propagate(&self, node: &Node<T>, gy: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let y = &node.value;
        let mut acc = |v: Var, g: Matrix<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, gy.matmul_t(bv));
                }
                if self.rg(*b) {
                    acc(*b, av.t_matmul(gy));
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = gy b, db = gyᵀ a
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, gy.matmul(bv));
                }
                if self.rg(*b) {
                    acc(*b, gy.t_matmul(av));
                }
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::AddRow(a, r) => {
                acc(*a, gy.clone());
                if self.rg(*r) {
                    acc(*r, column_sums(gy));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, gy.zip_map(bv, |g, x| g * x));
                }
                if self.rg(*b) {
                    acc(*b, gy.zip_map(av, |g, x| g * x));
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.value(*a), self.value(*r));
                if self.rg(*a) {
                    let mut ga = gy.clone();
                    for i in 0..ga.rows() {
                        for (g, &s) in ga.row_mut(i).iter_mut().zip(rv.data()) {
                            *g = *g * s;
                        }
                    }
                    acc(*a, ga);
                }
                if self.rg(*r) {
                    acc(*r, column_sums(&gy.zip_map(av, |g, x| g * x)));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.rg(*a) {
                    acc(*a, gy.zip_map(bv, |g, d| g / d));
                }
                if self.rg(*b) {
                    // d(a/b)/db = −y/b
                    let t = gy.zip_map(y, |g, q| g * q);
                    acc(*b, t.zip_map(bv, |tq, d| -tq / d));
                }
            }
            Op::Scale(a, s) => acc(*a, gy.map(|g| g * *s)),
            Op::Shift(a) => acc(*a, gy.clone()),
            Op::Tanh(a) => acc(*a, gy.zip_map(y, |g, t| g * (T::one() - t * t))),
            Op::Sigmoid(a) => acc(*a, gy.zip_map(y, |g, s| g * s * (T::one() - s))),
            Op::Exp(a) => acc(*a, gy.zip_map(y, |g, e| g * e)),
            Op::Log(a) => acc(*a, gy.zip_map(self.value(*a), |g, x| g / x)),
            Op::Sqrt(a) => {
                let two = T::one() + T::one();
                acc(*a, gy.zip_map(y, |g, r| g / (two * r)))
            }
            Op::Relu(a) => acc(*a, gy.zip_map(self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() })),
            Op::Softmax(a) => {
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), gy.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                    for ((o, &p), &g) in gx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = p * (g - dot);
                    }
                }
                acc(*a, gx);
            }
            Op::LogSoftmax(a) => {
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), gy.row(i));
                    let total: T = gr.iter().copied().sum();
                    for ((o, &ly), &g) in gx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = g - ly.exp() * total;
                    }
                }
                acc(*a, gx);
            }
            Op::LayerNorm(a, inv_std) => {
                let c = y.cols();
                let cn = T::from_usize(c).unwrap();
                let mut gx = Matrix::zeros(y.rows(), c);
                for (i, &s) in inv_std.iter().enumerate() {
                    let (xh, gr) = (y.row(i), gy.row(i));
                    let mean_g = gr.iter().copied().sum::<T>() / cn;
                    let mean_gx = xh.iter().zip(gr).map(|(&h, &g)| h * g).sum::<T>() / cn;
                    for ((o, &h), &g) in gx.row_mut(i).iter_mut().zip(xh).zip(gr) {
                        *o = s * (g - mean_g - h * mean_gx);
                    }
                }
                acc(*a, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        let mut gp = Matrix::zeros(gy.rows(), w);
                        for i in 0..gy.rows() {
                            gp.row_mut(i).copy_from_slice(&gy.row(i)[off..off + w]);
                        }
                        acc(p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = gy.cols();
                let mut off = 0;
                for &p in parts {
                    let n = self.shape(p).0;
                    if self.rg(p) {
                        acc(p, Matrix::from_vec(n, c, gy.data()[off * c..(off + n) * c].to_vec()));
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (n, c) = self.shape(*a);
                let mut gx = Matrix::zeros(n, c);
                for i in 0..n {
                    gx.row_mut(i)[*start..*start + gy.cols()].copy_from_slice(gy.row(i));
                }
                acc(*a, gx);
            }
            Op::SliceRows(a, start) => {
                let (n, c) = self.shape(*a);
                let mut gx = Matrix::zeros(n, c);
                gx.data_mut()[start * c..(start + gy.rows()) * c].copy_from_slice(gy.data());
                acc(*a, gx);
            }
            Op::Transpose(a) => acc(*a, gy.transpose()),
            Op::GatherRows(t, idx) => {
                let (n, c) = self.shape(*t);
                let mut gx = Matrix::zeros(n, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &g) in gx.row_mut(i).iter_mut().zip(gy.row(k)) {
                        *o = *o + g;
                    }
                }
                acc(*t, gx);
            }
            Op::Pick(a, pos) => {
                let (n, c) = self.shape(*a);
                let mut gx = Matrix::zeros(n, c);
                for (k, &(r, col)) in pos.iter().enumerate() {
                    let cur = gx.get(r, col);
                    gx.set(r, col, cur + gy.data()[k]);
                }
                acc(*a, gx);
            }
            Op::Sum(a) => {
                let (n, c) = self.shape(*a);
                acc(*a, Matrix::filled(n, c, gy.data()[0]));
            }
            Op::MeanRows(a) => {
                let (n, c) = self.shape(*a);
                let inv = T::one() / T::from_usize(n).unwrap();
                let mut gx = Matrix::zeros(n, c);
                for i in 0..n {
                    for (o, &g) in gx.row_mut(i).iter_mut().zip(gy.data()) {
                        *o = g * inv;
                    }
                }
                acc(*a, gx);
            }
            Op::RepeatRows(a) => acc(*a, column_sums(gy)),
        }
    }
}

fn column_sums<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = vec![T::zero(); m.cols()];
    for i in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(i)) {
            *o = *o + v;
        }
    }
    Matrix::row_vector(out)
}
