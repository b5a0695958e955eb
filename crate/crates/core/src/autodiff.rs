//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive in execution order. Each recorded node
//! holds its forward value; [`Tape::backward`] walks the nodes in exact reverse
//! order, accumulating cotangents into per-node gradient slots.
//!
//! Leaves come in two flavours: [`Tape::param`] (gradient wanted) and
//! [`Tape::constant`] (treated as a fixed input). Nodes whose inputs are all
//! constants are themselves constant and are skipped by the backward pass, so
//! stop-gradient is expressed by feeding values in as constants.
//!
//! Broadcasting is limited to row vectors over the batch axis
//! ([`Tape::add_row`], [`Tape::mul_row`]) and per-row scalars ([`Tape::lerp_rows`]).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded node, without its operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Param,
    Constant,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    MatMul,
    AddRow,
    MulRow,
    LeakyRelu,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Pow,
    Square,
    Clamp,
    Mean,
    SumSq,
    SumCols,
    ColMean,
    ColVar,
    SliceCols,
    Lerp,
    BatchNorm,
    SelectRows,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Param,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    LeakyRelu(Var, T),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, T),
    Square(Var),
    Clamp(Var, T, T),
    Mean(Var),
    SumSq(Var),
    SumCols(Var),
    ColMean(Var),
    ColVar(Var),
    SliceCols(Var, usize),
    Lerp(Var, Var, Var),
    BatchNorm(Var, Tensor<T>),
    SelectRows(Var, Vec<usize>),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Param => OpKind::Param,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Pow(..) => OpKind::Pow,
            Op::Square(..) => OpKind::Square,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Mean(..) => OpKind::Mean,
            Op::SumSq(..) => OpKind::SumSq,
            Op::SumCols(..) => OpKind::SumCols,
            Op::ColMean(..) => OpKind::ColMean,
            Op::ColVar(..) => OpKind::ColVar,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::Lerp(..) => OpKind::Lerp,
            Op::BatchNorm(..) => OpKind::BatchNorm,
            Op::SelectRows(..) => OpKind::SelectRows,
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every node on the tape.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    slots: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; nodes the root does not depend on get a zero tensor.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.slots[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.slots[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn is_row_of(row: &[usize], matrix: &[usize]) -> bool {
    row.len() == 2 && matrix.len() == 2 && row[0] == 1 && row[1] == matrix[1]
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Ids of the nodes `v` was computed from, in operand order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Param | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Lerp(a, b, m) => vec![*a, *b, *m],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::LeakyRelu(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Pow(a, _)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::Mean(a)
            | Op::SumSq(a)
            | Op::SumCols(a)
            | Op::ColMean(a)
            | Op::ColVar(a)
            | Op::SliceCols(a, _)
            | Op::BatchNorm(a, _)
            | Op::SelectRows(a, _) => vec![*a],
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let kind = op.kind();
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite {
                op: kind_name(kind),
                index,
            });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Smallest distance between an input of a relu, leaky relu or clamp on a
    /// gradient path and the point where that primitive is not differentiable.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in self.nodes.iter().filter(|n| n.requires_grad) {
            let (a, lo, hi) = match &node.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => (*a, 0.0, 0.0),
                Op::Clamp(a, lo, hi) => (*a, lo.as_f64(), hi.as_f64()),
                _ => continue,
            };
            for &x in self.nodes[a.0].value.data() {
                let x = x.as_f64();
                margin = margin.min((x - lo).abs()).min((x - hi).abs());
            }
        }
        margin
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Param,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a fixed input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        let rg = self.rg(&[a, b]);
        self.push(op, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, s), value, rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(Op::AddScalar(a), value, rg)
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), value, rg)
    }

    /// Adds a `[1×n]` row to every row of a `[B×n]` matrix (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(a, row, "add_row", |x, r| x + r)?;
        let rg = self.rg(&[a, row]);
        self.push(Op::AddRow(a, row), value, rg)
    }

    /// Multiplies every row of a `[B×n]` matrix elementwise by a `[1×n]` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(a, row, "mul_row", |x, r| x * r)?;
        let rg = self.rg(&[a, row]);
        self.push(Op::MulRow(a, row), value, rg)
    }

    fn row_broadcast(
        &self,
        a: Var,
        row: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, rv) = (self.value(a), self.value(row));
        if !is_row_of(rv.shape(), av.shape()) {
            return Err(Error::shape(name, av.shape(), rv.shape()));
        }
        let n = av.cols();
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(n.max(1)) {
            for (x, &r) in chunk.iter_mut().zip(rv.data()) {
                *x = f(*x, r);
            }
        }
        Ok(out)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let s = T::from_f64(slope);
        let value = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * s });
        let rg = self.rg(&[a]);
        self.push(Op::LeakyRelu(a, s), value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(&[a]);
        self.push(Op::Relu(a), value, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(T::tanh);
        let rg = self.rg(&[a]);
        self.push(Op::Tanh(a), value, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(Op::Sigmoid(a), value, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(T::exp);
        let rg = self.rg(&[a]);
        self.push(Op::Exp(a), value, rg)
    }

    /// Natural logarithm; non-positive inputs yield a non-finite error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(T::ln);
        let rg = self.rg(&[a]);
        self.push(Op::Log(a), value, rg)
    }

    /// Elementwise `x^p`.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let pt = T::from_f64(p);
        let value = self.value(a).map(|x| x.powf(pt));
        let rg = self.rg(&[a]);
        self.push(Op::Pow(a, pt), value, rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(Op::Square(a), value, rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let value = self.value(a).map(|x| x.max(l).min(h));
        let rg = self.rg(&[a]);
        self.push(Op::Clamp(a, l, h), value, rg)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), value, rg)
    }

    /// Squared L2 norm of all elements, as a scalar.
    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|&x| x * x).sum();
        let rg = self.rg(&[a]);
        self.push(Op::SumSq(a), Tensor::scalar(s), rg)
    }

    /// Mean of squared elements; the batch-mean `‖·‖²` used by every loss.
    pub fn mean_sq(&mut self, a: Var) -> Result<Var> {
        let sq = self.square(a)?;
        self.mean(sq)
    }

    /// Row sums, `[B×n] → [B×1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::shape("sum_cols", av.shape(), &[0, 0]));
        }
        let rows = av.rows();
        let data = (0..rows).map(|r| av.row(r).iter().copied().sum()).collect();
        let value = Tensor::new(vec![rows, 1], data)?;
        let rg = self.rg(&[a]);
        self.push(Op::SumCols(a), value, rg)
    }

    /// Column means over the batch axis, `[B×n] → [1×n]`.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 || av.rows() == 0 {
            return Err(Error::shape("col_mean", av.shape(), &[1, av.cols()]));
        }
        let value = av.col_mean();
        let rg = self.rg(&[a]);
        self.push(Op::ColMean(a), value, rg)
    }

    /// Column population variances over the batch axis, `[B×n] → [1×n]`.
    pub fn col_var(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 || av.rows() == 0 {
            return Err(Error::shape("col_var", av.shape(), &[1, av.cols()]));
        }
        let value = av.col_var();
        let rg = self.rg(&[a]);
        self.push(Op::ColVar(a), value, rg)
    }

    /// Columns `start..end` of a `[B×n]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 || start >= end || end > av.cols() {
            return Err(Error::shape("slice_cols", av.shape(), &[start, end]));
        }
        let n = av.cols();
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * n + start..r * n + end]);
        }
        let value = Tensor::new(vec![rows, end - start], data)?;
        let rg = self.rg(&[a]);
        self.push(Op::SliceCols(a, start), value, rg)
    }

    /// Per-row affine interpolation `mu_i·a_i + (1 − mu_i)·b_i` with `mu: [B×1]`.
    pub fn lerp_rows(&mut self, a: Var, b: Var, mu: Var) -> Result<Var> {
        let (av, bv, mv) = (self.value(a), self.value(b), self.value(mu));
        if av.shape() != bv.shape() {
            return Err(Error::shape("lerp_rows", av.shape(), bv.shape()));
        }
        if av.shape().len() != 2 || mv.shape() != [av.rows(), 1] {
            return Err(Error::shape("lerp_rows", av.shape(), mv.shape()));
        }
        let n = av.cols();
        let mut out = av.clone();
        for (r, chunk) in out.data_mut().chunks_mut(n.max(1)).enumerate() {
            let m = mv.data()[r];
            for (x, &y) in chunk.iter_mut().zip(bv.row(r)) {
                *x = m * *x + (T::one() - m) * y;
            }
        }
        let rg = self.rg(&[a, b, mu]);
        self.push(Op::Lerp(a, b, mu), out, rg)
    }

    /// Batch normalization without affine parameters:
    /// `(z − mean_batch) / sqrt(var_batch + eps)` per column, population variance.
    pub fn batch_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 || av.rows() < 2 {
            return Err(Error::Invalid(format!(
                "batch_norm needs a [B×n] batch with B ≥ 2, got {:?}",
                av.shape()
            )));
        }
        let mean = av.col_mean();
        let var = av.col_var();
        let eps = T::from_f64(eps);
        let inv_std = var.map(|v| T::one() / (v + eps).sqrt());
        let n = av.cols();
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(n.max(1)) {
            for ((x, &m), &s) in chunk.iter_mut().zip(mean.data()).zip(inv_std.data()) {
                *x = (*x - m) * s;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Op::BatchNorm(a, inv_std), out, rg)
    }

    /// Gathers rows by index (indices may repeat); `[B×n] → [len×n]`.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::shape("select_rows", av.shape(), &[0, 0]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::Invalid(format!(
                "select_rows index {bad} out of range for {} rows",
                av.rows()
            )));
        }
        let value = av.select_rows(indices);
        let rg = self.rg(&[a]);
        self.push(Op::SelectRows(a, indices.to_vec()), value, rg)
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(Error::Invalid(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        slots[root.0] = Some(Tensor::full(root_val.shape(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            self.propagate(node, &g, &mut slots);
            slots[i] = Some(g);
        }
        Ok(Gradients {
            slots,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let unary = |a: Var, slots: &mut [Option<Tensor<T>>], f: &dyn Fn(T, T, T) -> T| {
            // f(input, output, upstream)
            if self.wants(a) {
                let x = val(a);
                let data = x
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                    .collect();
                accumulate(slots, a, Tensor::new(x.shape().to_vec(), data).unwrap());
            }
        };

        match &node.op {
            Op::Param | Op::Constant => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(slots, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(slots, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(slots, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(slots, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.zip_map(val(*b), "mul", |gi, bi| gi * bi).unwrap();
                    accumulate(slots, *a, d);
                }
                if self.wants(*b) {
                    let d = g.zip_map(val(*a), "mul", |gi, ai| gi * ai).unwrap();
                    accumulate(slots, *b, d);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                unary(*a, slots, &|_, _, gi| gi * s);
            }
            Op::AddScalar(a) => {
                if self.wants(*a) {
                    accumulate(slots, *a, g.clone());
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    // dA = G·Bᵀ
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        T::zero(),
                        &mut d,
                    );
                    accumulate(slots, *a, Tensor::new(vec![m, k], d).unwrap());
                }
                if self.wants(*b) {
                    // dB = Aᵀ·G
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        T::zero(),
                        &mut d,
                    );
                    accumulate(slots, *b, Tensor::new(vec![k, n], d).unwrap());
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(slots, *a, g.clone());
                }
                if self.wants(*row) {
                    accumulate(slots, *row, g.col_sum());
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (val(*a), val(*row));
                let n = av.cols();
                if self.wants(*a) {
                    let mut d = g.clone();
                    for chunk in d.data_mut().chunks_mut(n.max(1)) {
                        for (x, &r) in chunk.iter_mut().zip(rv.data()) {
                            *x = *x * r;
                        }
                    }
                    accumulate(slots, *a, d);
                }
                if self.wants(*row) {
                    let mut acc = vec![T::zero(); n];
                    for r in 0..av.rows() {
                        for ((s, &gi), &ai) in acc.iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *s += gi * ai;
                        }
                    }
                    accumulate(slots, *row, Tensor::new(vec![1, n], acc).unwrap());
                }
            }
            Op::LeakyRelu(a, s) => {
                let s = *s;
                unary(*a, slots, &|x, _, gi| if x > T::zero() { gi } else { gi * s });
            }
            Op::Relu(a) => {
                unary(*a, slots, &|x, _, gi| if x > T::zero() { gi } else { T::zero() });
            }
            Op::Tanh(a) => unary(*a, slots, &|_, y, gi| gi * (T::one() - y * y)),
            Op::Sigmoid(a) => unary(*a, slots, &|_, y, gi| gi * y * (T::one() - y)),
            Op::Exp(a) => unary(*a, slots, &|_, y, gi| gi * y),
            Op::Log(a) => unary(*a, slots, &|x, _, gi| gi / x),
            Op::Pow(a, p) => {
                let p = *p;
                unary(*a, slots, &|x, _, gi| gi * p * x.powf(p - T::one()));
            }
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                unary(*a, slots, &|x, _, gi| gi * two * x);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                unary(*a, slots, &|x, _, gi| {
                    if x >= lo && x <= hi {
                        gi
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let x = val(*a);
                    let gi = g.item() / T::from_f64(x.len() as f64);
                    accumulate(slots, *a, Tensor::full(x.shape(), gi));
                }
            }
            Op::SumSq(a) => {
                let two_g = T::from_f64(2.0) * g.item();
                if self.wants(*a) {
                    accumulate(slots, *a, val(*a).map(|x| two_g * x));
                }
            }
            Op::SumCols(a) => {
                if self.wants(*a) {
                    let x = val(*a);
                    let n = x.cols();
                    let mut d = Tensor::zeros(x.shape());
                    for (r, chunk) in d.data_mut().chunks_mut(n.max(1)).enumerate() {
                        chunk.fill(g.data()[r]);
                    }
                    accumulate(slots, *a, d);
                }
            }
            Op::ColMean(a) => {
                if self.wants(*a) {
                    let x = val(*a);
                    let inv = T::one() / T::from_f64(x.rows() as f64);
                    let mut d = Tensor::zeros(x.shape());
                    let n = x.cols();
                    for chunk in d.data_mut().chunks_mut(n.max(1)) {
                        for (o, &gi) in chunk.iter_mut().zip(g.data()) {
                            *o = gi * inv;
                        }
                    }
                    accumulate(slots, *a, d);
                }
            }
            Op::ColVar(a) => {
                if self.wants(*a) {
                    let x = val(*a);
                    let mean = x.col_mean();
                    let scale = T::from_f64(2.0) / T::from_f64(x.rows() as f64);
                    let mut d = x.clone();
                    let n = x.cols();
                    for chunk in d.data_mut().chunks_mut(n.max(1)) {
                        for ((o, &m), &gi) in chunk.iter_mut().zip(mean.data()).zip(g.data()) {
                            *o = gi * scale * (*o - m);
                        }
                    }
                    accumulate(slots, *a, d);
                }
            }
            Op::SliceCols(a, start) => {
                if self.wants(*a) {
                    let x = val(*a);
                    let n = x.cols();
                    let w = g.cols();
                    let mut d = Tensor::zeros(x.shape());
                    for r in 0..x.rows() {
                        d.data_mut()[r * n + start..r * n + start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(slots, *a, d);
                }
            }
            Op::Lerp(a, b, mu) => {
                let mv = val(*mu);
                let n = g.cols();
                if self.wants(*a) {
                    let mut d = g.clone();
                    for (r, chunk) in d.data_mut().chunks_mut(n.max(1)).enumerate() {
                        let m = mv.data()[r];
                        chunk.iter_mut().for_each(|x| *x = *x * m);
                    }
                    accumulate(slots, *a, d);
                }
                if self.wants(*b) {
                    let mut d = g.clone();
                    for (r, chunk) in d.data_mut().chunks_mut(n.max(1)).enumerate() {
                        let m = T::one() - mv.data()[r];
                        chunk.iter_mut().for_each(|x| *x = *x * m);
                    }
                    accumulate(slots, *b, d);
                }
                if self.wants(*mu) {
                    let (av, bv) = (val(*a), val(*b));
                    let data = (0..g.rows())
                        .map(|r| {
                            g.row(r)
                                .iter()
                                .zip(av.row(r))
                                .zip(bv.row(r))
                                .map(|((&gi, &ai), &bi)| gi * (ai - bi))
                                .sum()
                        })
                        .collect();
                    accumulate(slots, *mu, Tensor::new(vec![g.rows(), 1], data).unwrap());
                }
            }
            Op::SelectRows(a, indices) => {
                if self.wants(*a) {
                    let x = val(*a);
                    let n = x.cols();
                    let mut d = Tensor::zeros(x.shape());
                    for (r, &src) in indices.iter().enumerate() {
                        let dst = &mut d.data_mut()[src * n..(src + 1) * n];
                        for (o, &gi) in dst.iter_mut().zip(g.row(r)) {
                            *o += gi;
                        }
                    }
                    accumulate(slots, *a, d);
                }
            }
            Op::BatchNorm(a, inv_std) => {
                if self.wants(*a) {
                    // dx = inv_std/B · (B·dy − Σdy − x̂·Σ(dy·x̂)), per column
                    let y = &node.value;
                    let b = y.rows();
                    let n = y.cols();
                    let mut sum_g = vec![T::zero(); n];
                    let mut sum_gy = vec![T::zero(); n];
                    for r in 0..b {
                        for j in 0..n {
                            let gi = g.row(r)[j];
                            sum_g[j] += gi;
                            sum_gy[j] += gi * y.row(r)[j];
                        }
                    }
                    let bt = T::from_f64(b as f64);
                    let mut d = Tensor::zeros(y.shape());
                    for r in 0..b {
                        for j in 0..n {
                            let gi = g.row(r)[j];
                            let yi = y.row(r)[j];
                            d.data_mut()[r * n + j] =
                                inv_std.data()[j] / bt * (bt * gi - sum_g[j] - yi * sum_gy[j]);
                        }
                    }
                    accumulate(slots, *a, d);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(slots: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) {
    match &mut slots[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn kind_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Param => "param",
        OpKind::Constant => "constant",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::Scale => "scale",
        OpKind::AddScalar => "add_scalar",
        OpKind::MatMul => "matmul",
        OpKind::AddRow => "add_row",
        OpKind::MulRow => "mul_row",
        OpKind::LeakyRelu => "leaky_relu",
        OpKind::Relu => "relu",
        OpKind::Tanh => "tanh",
        OpKind::Sigmoid => "sigmoid",
        OpKind::Exp => "exp",
        OpKind::Log => "log",
        OpKind::Pow => "pow",
        OpKind::Square => "square",
        OpKind::Clamp => "clamp",
        OpKind::Mean => "mean",
        OpKind::SumSq => "sum_sq",
        OpKind::SumCols => "sum_cols",
        OpKind::ColMean => "col_mean",
        OpKind::ColVar => "col_var",
        OpKind::SliceCols => "slice_cols",
        OpKind::Lerp => "lerp_rows",
        OpKind::BatchNorm => "batch_norm",
        OpKind::SelectRows => "select_rows",
    }
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    /// First coordinate where either side was NaN, if any.
    pub nan_at: Option<usize>,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.nan_at.is_none() && self.max_rel_error < tol
    }
}

impl GradCheck {
    /// Worst `|a − n| / max(1, |a|)` over paired coordinates.
    pub fn compare(analytic: &[f64], numeric: &[f64]) -> Self {
        let mut out = GradCheck {
            max_rel_error: 0.0,
            worst_index: 0,
            nan_at: None,
        };
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            if a.is_nan() || n.is_nan() {
                out.nan_at.get_or_insert(i);
                out.max_rel_error = f64::INFINITY;
                out.worst_index = i;
                continue;
            }
            let err = (a - n).abs() / a.abs().max(1.0);
            if err > out.max_rel_error {
                out.max_rel_error = err;
                out.worst_index = i;
            }
        }
        out
    }
}

/// Central differences of `value` at `point`; failed evaluations give NaN.
pub fn numeric_gradient<T: Scalar>(
    value: impl Fn(&Tensor<T>) -> Result<T>,
    point: &Tensor<T>,
    step: f64,
) -> Result<Vec<f64>> {
    if step <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let h = T::from_f64(step);
    let mut probe = point.clone();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + h;
        let up = value(&probe);
        probe.data_mut()[i] = x0 - h;
        let down = value(&probe);
        probe.data_mut()[i] = x0;
        // the effective step after rounding x0 ± h
        let span = ((x0 + h) - (x0 - h)).as_f64();
        out.push(match (up, down) {
            (Ok(u), Ok(d)) => (u.as_f64() - d.as_f64()) / span,
            _ => f64::NAN,
        });
    }
    Ok(out)
}

/// Compares `analytic` against central differences of `value` at `point`.
pub fn compare_gradient<T: Scalar>(
    value: impl Fn(&Tensor<T>) -> Result<T>,
    analytic: &Tensor<T>,
    point: &Tensor<T>,
    step: f64,
) -> Result<GradCheck> {
    if analytic.shape() != point.shape() {
        return Err(Error::shape("grad_check", analytic.shape(), point.shape()));
    }
    let numeric = numeric_gradient(value, point, step)?;
    Ok(GradCheck::compare(&analytic.to_f64_vec(), &numeric))
}

/// Gradient check of a tape-building closure that maps one input leaf to a scalar.
pub fn grad_check<T: Scalar>(
    f: impl Fn(&mut Tape<T>, Var) -> Result<Var>,
    point: &Tensor<T>,
    step: f64,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.take(x);
    let value = |p: &Tensor<T>| -> Result<T> {
        let mut t = Tape::new();
        let x = t.param(p.clone());
        let y = f(&mut t, x)?;
        let v = t.value(y);
        if !v.is_scalar() {
            return Err(Error::Invalid("grad_check closure must return a scalar".into()));
        }
        Ok(v.item())
    };
    compare_gradient(value, &analytic, point, step)
}
