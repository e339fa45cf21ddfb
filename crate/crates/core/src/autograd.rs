//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough saved state to run its backward rule. Parameters live in a
//! [`ParamStore`] outside the graph; parameter leaves borrow their value from
//! the store, and [`Graph::backward`] adds parameter gradients into a
//! [`Gradients`] buffer. Gradients accumulate until explicitly zeroed.
//!
//! Every forward op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of silently propagating it.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{dot, softmax_into};
use crate::{Error, Result, Tensor};

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Named model parameters. Names are unique; registration order fixes ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Overwrites a parameter's value; the shape must not change.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        self.params[id.0].tensor.same_shape(&value, "assign")?;
        self.params[id.0].tensor = value;
        Ok(())
    }
}

/// One gradient buffer per parameter, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .params
                .iter()
                .map(|p| Tensor::zeros(p.tensor.rows(), p.tensor.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn scale(&mut self, alpha: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(
            self.grads
                .iter()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>(),
        )
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Embed(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Min(Var, Var),
    Max(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor,
        count: usize,
    },
    PickSum {
        x: Var,
        picks: Vec<(usize, usize)>,
    },
}

struct Node {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded tape of tensor operations.
pub struct Graph<'p> {
    params: &'p ParamStore,
    trainable: Option<&'p [bool]>,
    nodes: Vec<Node>,
}

fn check(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            trainable: None,
            nodes: Vec::with_capacity(256),
        }
    }

    /// Like [`Graph::new`], but parameters with `trainable[id] == false` are
    /// treated as constants: no gradient flows into them.
    pub fn with_trainable(params: &'p ParamStore, trainable: &'p [bool]) -> Self {
        Self {
            params,
            trainable: Some(trainable),
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        let value = check(name, value)?;
        Ok(self.push(value, op, needs_grad))
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push_checked("constant", t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.trainable.is_none_or(|m| m[id.0]);
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Rows `ids` of an embedding table parameter.
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = self.params.get(table).select_rows(ids)?;
        let needs_grad = self.trainable.is_none_or(|m| m[table.0]);
        self.push_checked("embed", t, Op::Embed(table, ids.to_vec()), needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("matmul", out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_bt(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("matmul_bt", out, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("add", out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("sub", out, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("mul", out, Op::Mul(a, b), ng)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("div", out, Op::Div(a, b), ng)
    }

    /// Adds a `[1 × n]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: xv.shape(),
                right: bv.shape(),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push_checked("add_row", out, Op::AddRow(x, bias), ng)
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let out = self.value(x).scale(alpha);
        let ng = self.needs(x);
        self.push_checked("scale", out, Op::Scale(x, alpha), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        let ng = self.needs(x);
        self.push_checked("add_scalar", out, Op::AddScalar(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(libm::tanh);
        let ng = self.needs(x);
        self.push_checked("tanh", out, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push_checked("sigmoid", out, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(x);
        self.push_checked("relu", out, Op::Relu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(libm::exp);
        let ng = self.needs(x);
        self.push_checked("exp", out, Op::Exp(x), ng)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(libm::log);
        let ng = self.needs(x);
        self.push_checked("ln", out, Op::Ln(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(libm::fabs);
        let ng = self.needs(x);
        self.push_checked("abs", out, Op::Abs(x), ng)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), "min", |x, y| if y < x { y } else { x })?;
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("min", out, Op::Min(a, b), ng)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), "max", |x, y| if y > x { y } else { x })?;
        let ng = self.needs(a) || self.needs(b);
        self.push_checked("max", out, Op::Max(a, b), ng)
    }

    /// Row-wise softmax. A `[n × 0]` input yields a `[n × 0]` output.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            softmax_into(xv.row(r), out.row_mut(r));
        }
        let ng = self.needs(x);
        self.push_checked("softmax", out, Op::Softmax(x), ng)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i + offset`.
    /// Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var, offset: usize) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Tensor::zeros(xv.rows(), cols);
        for r in 0..xv.rows() {
            let visible = (r + offset + 1).min(cols);
            softmax_into(&xv.row(r)[..visible], &mut out.row_mut(r)[..visible]);
        }
        let ng = self.needs(x);
        // Backward of softmax is correct for masked entries too: y = 0 there.
        self.push_checked("causal_softmax", out, Op::Softmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let lse = crate::tensor::log_sum_exp(xv.row(r));
            out.row_mut(r).iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.needs(x);
        self.push_checked("log_softmax", out, Op::LogSoftmax(x), ng)
    }

    /// Row-wise layer normalization with `[1 × n]` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.cols();
        if gv.shape() != (1, n) || bv.shape() != (1, n) {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape(),
                right: gv.shape(),
            });
        }
        let mut xhat = Tensor::zeros(xv.rows(), n);
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Tensor::zeros(xv.rows(), n);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let istd = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std.push(istd);
            let xh = xhat.row_mut(r);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * istd;
            }
            let o = out.row_mut(r);
            for j in 0..n {
                o[j] = xhat.get(r, j) * gv.data()[j] + bv.data()[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push_checked(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        let ng = self.needs(x);
        self.push_checked("slice_cols", out, Op::SliceCols(x, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push_checked("concat_cols", out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |p| self.value(*p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: (rows, cols),
                    right: v.shape(),
                });
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push_checked("concat_rows", out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(idx)?;
        let ng = self.needs(x);
        self.push_checked("select_rows", out, Op::SelectRows(x, idx.to_vec()), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        let ng = self.needs(x);
        self.push_checked("transpose", out, Op::Transpose(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push_checked("sum", out, Op::Sum(x), ng)
    }

    /// Mean of all entries; the mean of an empty tensor is 0.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = if v.is_empty() { 0.0 } else { v.sum() / v.len() as f64 };
        let ng = self.needs(x);
        self.push_checked("mean", Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Mean token cross entropy. Rows whose target is `None` are masked out of
    /// both the sum and the count. With no valid rows the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape(),
                right: (targets.len(), 1),
            });
        }
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            softmax_into(lv.row(r), probs.row_mut(r));
            if let Some(t) = *t {
                if t >= lv.cols() {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "target {t} out of range for {} classes",
                        lv.cols()
                    )));
                }
                total += crate::tensor::log_sum_exp(lv.row(r)) - lv.get(r, t);
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.needs(logits);
        self.push_checked(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        )
    }

    /// Sum of selected `(row, col)` entries, as a scalar.
    pub fn pick_sum(&mut self, x: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let v = self.value(x);
        let mut s = 0.0;
        for &(r, c) in picks {
            if r >= v.rows() || c >= v.cols() {
                return Err(Error::ShapeMismatch {
                    op: "pick_sum",
                    left: v.shape(),
                    right: (r, c),
                });
            }
            s += v.get(r, c);
        }
        let ng = self.needs(x);
        self.push_checked(
            "pick_sum",
            Tensor::scalar(s),
            Op::PickSum {
                x,
                picks: picks.to_vec(),
            },
            ng,
        )
    }

    /// Propagates `d loss / d param` for every trainable parameter reachable
    /// from `loss` and adds it into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NotScalar(lv.shape()));
        }
        if grads.len() != self.params.len() {
            return Err(Error::InvalidArgument(
                "gradient buffer does not match the parameter store".into(),
            ));
        }
        let mut ng: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        ng[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = ng[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let out = node.value.as_ref();
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => grads.get_mut(*id).add_assign(&g),
                Op::Embed(id, ids) => {
                    let table = grads.get_mut(*id);
                    for (r, &tok) in ids.iter().enumerate() {
                        for (t, v) in table.row_mut(tok).iter_mut().zip(g.row(r)) {
                            *t += v;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul_bt(self.value(*b))?;
                        self.acc(&mut ng, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).matmul_at(&g)?;
                        self.acc(&mut ng, *b, gb);
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul(self.value(*b))?;
                        self.acc(&mut ng, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.matmul_at(self.value(*a))?;
                        self.acc(&mut ng, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        self.acc(&mut ng, *b, g.clone());
                    }
                    self.acc(&mut ng, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        self.acc(&mut ng, *b, g.scale(-1.0));
                    }
                    self.acc(&mut ng, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.zip_map(self.value(*b), "mul_bw", |x, y| x * y)?;
                        self.acc(&mut ng, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.zip_map(self.value(*a), "mul_bw", |x, y| x * y)?;
                        self.acc(&mut ng, *b, gb);
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if self.needs(*a) {
                        let ga = g.zip_map(bv, "div_bw", |x, y| x / y)?;
                        self.acc(&mut ng, *a, ga);
                    }
                    if self.needs(*b) {
                        let q = out.unwrap();
                        let mut gb = g.zip_map(q, "div_bw", |x, y| -x * y)?;
                        for (v, d) in gb.data_mut().iter_mut().zip(bv.data()) {
                            *v /= d;
                        }
                        self.acc(&mut ng, *b, gb);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.needs(*bias) {
                        let mut gb = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        self.acc(&mut ng, *bias, gb);
                    }
                    self.acc(&mut ng, *x, g);
                }
                Op::Scale(x, alpha) => self.acc(&mut ng, *x, g.scale(*alpha)),
                Op::AddScalar(x) => self.acc(&mut ng, *x, g),
                Op::Tanh(x) => {
                    let gx = g.zip_map(out.unwrap(), "tanh_bw", |g, y| g * (1.0 - y * y))?;
                    self.acc(&mut ng, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(out.unwrap(), "sigmoid_bw", |g, y| g * y * (1.0 - y))?;
                    self.acc(&mut ng, *x, gx);
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), "relu_bw", |g, v| if v > 0.0 { g } else { 0.0 })?;
                    self.acc(&mut ng, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = g.zip_map(out.unwrap(), "exp_bw", |g, y| g * y)?;
                    self.acc(&mut ng, *x, gx);
                }
                Op::Ln(x) => {
                    let gx = g.zip_map(self.value(*x), "ln_bw", |g, v| g / v)?;
                    self.acc(&mut ng, *x, gx);
                }
                Op::Abs(x) => {
                    let gx = g.zip_map(self.value(*x), "abs_bw", |g, v| {
                        if v > 0.0 {
                            g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })?;
                    self.acc(&mut ng, *x, gx);
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(node.op, Op::Min(..));
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    let mut gb = Tensor::zeros(g.rows(), g.cols());
                    for k in 0..g.len() {
                        let (x, y) = (av.data()[k], bv.data()[k]);
                        let pick_b = if is_min { y < x } else { y > x };
                        if pick_b {
                            gb.data_mut()[k] = g.data()[k];
                        } else {
                            ga.data_mut()[k] = g.data()[k];
                        }
                    }
                    if self.needs(*b) {
                        self.acc(&mut ng, *b, gb);
                    }
                    self.acc(&mut ng, *a, ga);
                }
                Op::Softmax(x) => {
                    let y = out.unwrap();
                    let mut gx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s = dot(g.row(r), y.row(r));
                        for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yv * (gv - s);
                        }
                    }
                    self.acc(&mut ng, *x, gx);
                }
                Op::LogSoftmax(x) => {
                    let y = out.unwrap();
                    let mut gx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s: f64 = g.row(r).iter().sum();
                        for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = gv - libm::exp(yv) * s;
                        }
                    }
                    self.acc(&mut ng, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let n = xhat.cols();
                    if self.needs(*beta) {
                        let mut gb = Tensor::zeros(1, n);
                        for r in 0..g.rows() {
                            for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        self.acc(&mut ng, *beta, gb);
                    }
                    if self.needs(*gamma) {
                        let mut gg = Tensor::zeros(1, n);
                        for r in 0..g.rows() {
                            for ((o, v), h) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                                *o += v * h;
                            }
                        }
                        self.acc(&mut ng, *gamma, gg);
                    }
                    if self.needs(*x) {
                        let gam = self.value(*gamma).data();
                        let mut gx = Tensor::zeros(g.rows(), n);
                        let mut dxh = vec![0.0; n];
                        for r in 0..g.rows() {
                            for j in 0..n {
                                dxh[j] = g.get(r, j) * gam[j];
                            }
                            let s1: f64 = dxh.iter().sum();
                            let s2 = dot(&dxh, xhat.row(r));
                            let k = inv_std[r] / n as f64;
                            let xr = xhat.row(r);
                            for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                                *o = k * (n as f64 * dxh[j] - s1 - xr[j] * s2);
                            }
                        }
                        self.acc(&mut ng, *x, gx);
                    }
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.acc(&mut ng, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.needs(p) {
                            let gp = g.slice_cols(off, w)?;
                            self.acc(&mut ng, p, gp);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (h, w) = self.value(p).shape();
                        if self.needs(p) {
                            let gp = Tensor::from_vec(h, w, g.data()[off * w..(off + h) * w].to_vec())?;
                            self.acc(&mut ng, p, gp);
                        }
                        off += h;
                    }
                }
                Op::SelectRows(x, idx) => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.acc(&mut ng, *x, gx);
                }
                Op::Transpose(x) => self.acc(&mut ng, *x, g.transpose()),
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    self.acc(&mut ng, *x, Tensor::full(r, c, g.item()));
                }
                Op::Mean(x) => {
                    let (r, c) = self.value(*x).shape();
                    let n = (r * c).max(1) as f64;
                    self.acc(&mut ng, *x, Tensor::full(r, c, g.item() / n));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    if *count > 0 {
                        let k = g.item() / *count as f64;
                        let mut gx = Tensor::zeros(probs.rows(), probs.cols());
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = *t {
                                for (o, p) in gx.row_mut(r).iter_mut().zip(probs.row(r)) {
                                    *o = k * p;
                                }
                                let cur = gx.get(r, t);
                                gx.set(r, t, cur - k);
                            }
                        }
                        self.acc(&mut ng, *logits, gx);
                    }
                }
                Op::PickSum { x, picks } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for &(r, c) in picks {
                        let cur = gx.get(r, c);
                        gx.set(r, c, cur + g.item());
                    }
                    self.acc(&mut ng, *x, gx);
                }
            }
        }
        Ok(())
    }

    fn acc(&self, ng: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut ng[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}
