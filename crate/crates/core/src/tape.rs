//! Reverse-mode autodiff over [`Tensor`] kernels.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter through
//! [`Tape::param`]: trainable ones become differentiable leaves, frozen ones become
//! borrowed constants so no gradient work is spent on them. [`Tape::backward`]
//! walks the record in reverse and returns per-parameter [`Gradients`].

use crate::error::{Error, Result};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{self, LayerNormCache, Mode, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'s> {
    Owned(Tensor),
    Borrowed(&'s Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Affine { x: Var, alpha: Real },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Dropout { x: Var, mask: Vec<Real> },
    Gather {
        table: Var,
        indices: Vec<usize>,
        padding: Option<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Bce { p: Var, labels: Vec<Real> },
    Select { x: Var, index: usize },
}

struct Node<'s> {
    value: Value<'s>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node<'s>>,
}

/// Result of a backward pass.
pub struct Backward {
    params: Gradients,
    vars: Vec<Option<Tensor>>,
}

impl Backward {
    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }

    /// Gradient with respect to any recorded value (leaves included); `None` when
    /// nothing downstream depended on it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.vars.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn scalar(&self, v: Var) -> Real {
        self.value(v).data()[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient can be read back from [`Backward::grad`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store;
        let value = store.read(id);
        let trainable = store.is_trainable(id);
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: if trainable { Op::Param(id) } else { Op::Leaf },
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a)·op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = tensor::matmul_t(self.value(a), ta, self.value(b), tb)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul { a, ta, b, tb }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va, vb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(Real, Real) -> Real) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("zip_with shapes")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.len() != vx.cols() {
            return Err(shape_err("add_row", vx, vb));
        }
        let mut out = vx.clone();
        let c = vx.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRow { x, bias }, ng))
    }

    /// `alpha * x + beta`.
    pub fn affine(&mut self, x: Var, alpha: Real, beta: Real) -> Var {
        let out = self.value(x).map(|v| alpha * v + beta);
        let ng = self.needs(x);
        self.push(out, Op::Affine { x, alpha }, ng)
    }

    pub fn scale(&mut self, x: Var, s: Real) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::sigmoid);
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(Real::tanh);
        let ng = self.needs(x);
        self.push(out, Op::Tanh(x), ng)
    }

    /// Row softmax; `-inf` entries are masked out.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = tensor::softmax_rows(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Real) -> Result<Var> {
        let (out, cache) =
            tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            ng,
        ))
    }

    pub fn dropout(&mut self, x: Var, rate: Real, mode: Mode, rng: &mut RngStream) -> Result<Var> {
        let (out, mask) = tensor::dropout(self.value(x), rate, mode, rng)?;
        match mask {
            None => Ok(x),
            Some(mask) => {
                let ng = self.needs(x);
                Ok(self.push(out, Op::Dropout { x, mask }, ng))
            }
        }
    }

    /// Embedding lookup. Gradient for the `padding` row, if any, is dropped.
    pub fn gather_rows(
        &mut self,
        table: Var,
        indices: &[usize],
        padding: Option<usize>,
    ) -> Result<Var> {
        let t = self.value(table);
        let d = t.cols();
        let rows = t.rows();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: i,
                    size: rows,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
                padding,
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat_rows of nothing".into()))?;
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != d {
                return Err(shape_err("concat_rows", self.value(*first), v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat_cols of nothing".into()))?;
        let r = self.value(*first).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(&[r, total]);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != r {
                return Err(shape_err("concat_cols", self.value(*first), v));
            }
            let c = v.cols();
            for i in 0..r {
                out.row_mut(i)[offset..offset + c].copy_from_slice(v.row(i));
            }
            offset += c;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.rows() {
            return Err(Error::Index {
                what: "row slice",
                index: start + len,
                size: v.rows(),
            });
        }
        let c = v.cols();
        let out = Tensor::new(vec![len, c], v.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let v = self.value(x);
        if start + width > v.cols() {
            return Err(Error::Index {
                what: "column slice",
                index: start + width,
                size: v.cols(),
            });
        }
        let r = v.rows();
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&v.row(i)[start..start + width]);
        }
        let out = Tensor::new(vec![r, width], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Sum of all entries as a 1×1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as Real)
    }

    /// Single entry (flat index) as a 1×1 tensor.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        if index >= v.len() {
            return Err(Error::Index {
                what: "select",
                index,
                size: v.len(),
            });
        }
        let out = Tensor::scalar(v.data()[index]);
        let ng = self.needs(x);
        Ok(self.push(out, Op::Select { x, index }, ng))
    }

    /// Binary cross-entropy of a 1×1 probability against a 0/1 label.
    pub fn bce(&mut self, p: Var, label: Real) -> Result<Var> {
        self.bce_mean(p, &[label])
    }

    /// Mean binary cross-entropy of every entry of `p` against `labels`.
    pub fn bce_mean(&mut self, p: Var, labels: &[Real]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() || labels.is_empty() {
            return Err(Error::Dimension {
                op: "bce",
                lhs: pv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut total = 0.0;
        for (&q, &y) in pv.data().iter().zip(labels) {
            total += tensor::bce_loss(q, y)?;
        }
        let loss = total / labels.len() as Real;
        let ng = self.needs(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Backward> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let out_val = self.value(output);
        grads[output.0] = Some(Tensor::filled(out_val.shape(), 1.0));
        let mut params = Gradients::with_len(self.store.len());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads, &mut params)?;
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Backward {
            params,
            vars: grads,
        })
    }

    fn backward_node(
        &self,
        node: &Node<'_>,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut Gradients,
    ) -> Result<()> {
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.add(*id, g.clone()),
            Op::MatMul { a, ta, b, tb } => {
                let (da, db) = tensor::matmul_backward(
                    self.value(*a),
                    *ta,
                    self.value(*b),
                    *tb,
                    g,
                    self.needs(*a),
                    self.needs(*b),
                )?;
                if let Some(da) = da {
                    acc(*a, da, grads);
                }
                if let Some(db) = db {
                    acc(*b, db, grads);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone(), grads);
                }
                if self.needs(*b) {
                    acc(*b, g.clone(), grads);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone(), grads);
                }
                if self.needs(*b) {
                    acc(*b, g.map(|v| -v), grads);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let mut d = g.clone();
                    for (o, y) in d.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *o *= y;
                    }
                    acc(*a, d, grads);
                }
                if self.needs(*b) {
                    let mut d = g.clone();
                    for (o, x) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o *= x;
                    }
                    acc(*b, d, grads);
                }
            }
            Op::AddRow { x, bias } => {
                if self.needs(*x) {
                    acc(*x, g.clone(), grads);
                }
                if self.needs(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    acc(*bias, Tensor::new(shape, db)?, grads);
                }
            }
            Op::Affine { x, alpha } => acc(*x, g.map(|v| v * alpha), grads),
            Op::Relu(x) => {
                let mut d = g.clone();
                for (o, &xv) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if xv <= 0.0 {
                        *o = 0.0;
                    }
                }
                acc(*x, d, grads);
            }
            Op::Sigmoid(x) => {
                let y = node.value.get();
                let mut d = g.clone();
                for (o, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *o *= yv * (1.0 - yv);
                }
                acc(*x, d, grads);
            }
            Op::Tanh(x) => {
                let y = node.value.get();
                let mut d = g.clone();
                for (o, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *o *= 1.0 - yv * yv;
                }
                acc(*x, d, grads);
            }
            Op::Softmax(x) => {
                acc(*x, tensor::softmax_rows_backward(node.value.get(), g), grads);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let (dx, dgain, dbias) = tensor::layer_norm_backward(cache, self.value(*gain), g);
                if self.needs(*x) {
                    acc(*x, dx, grads);
                }
                if self.needs(*gain) {
                    acc(*gain, dgain.reshape(self.value(*gain).shape())?, grads);
                }
                if self.needs(*bias) {
                    acc(*bias, dbias.reshape(self.value(*bias).shape())?, grads);
                }
            }
            Op::Dropout { x, mask } => {
                let mut d = g.clone();
                for (o, m) in d.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                acc(*x, d, grads);
            }
            Op::Gather {
                table,
                indices,
                padding,
            } => {
                let t = self.value(*table);
                let mut d = Tensor::zeros(t.shape());
                for (r, &i) in indices.iter().enumerate() {
                    if Some(i) == *padding {
                        continue;
                    }
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*table, d, grads);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let v = self.value(p);
                    let r = v.rows();
                    if self.needs(p) {
                        let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                        acc(p, Tensor::new(v.shape().to_vec(), slice)?, grads);
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let v = self.value(p);
                    let w = v.cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(v.len());
                        for i in 0..g.rows() {
                            d.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        acc(p, Tensor::new(v.shape().to_vec(), d)?, grads);
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let v = self.value(*x);
                let mut d = Tensor::zeros(v.shape());
                let c = v.cols();
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, d, grads);
            }
            Op::SliceCols { x, start } => {
                let v = self.value(*x);
                let mut d = Tensor::zeros(v.shape());
                let w = g.cols();
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                }
                acc(*x, d, grads);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, g.clone().reshape(&shape)?, grads);
            }
            Op::Sum(x) => {
                let v = self.value(*x);
                acc(*x, Tensor::filled(v.shape(), g.data()[0]), grads);
            }
            Op::Select { x, index } => {
                let v = self.value(*x);
                let mut d = Tensor::zeros(v.shape());
                d.data_mut()[*index] = g.data()[0];
                acc(*x, d, grads);
            }
            Op::Bce { p, labels } => {
                let pv = self.value(*p);
                let scale = g.data()[0] / labels.len() as Real;
                let mut d = Vec::with_capacity(labels.len());
                for (&q, &y) in pv.data().iter().zip(labels) {
                    d.push(tensor::bce_grad(q, y)? * scale);
                }
                acc(*p, Tensor::new(pv.shape().to_vec(), d)?, grads);
            }
        }
        Ok(())
    }
}
