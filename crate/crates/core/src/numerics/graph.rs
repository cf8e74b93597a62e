//! Dynamic reverse-mode differentiation over [`Tensor2D`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. The
//! tape is rebuilt for each mini-batch; [`Graph::backward`] walks it in
//! reverse insertion order, which is a valid reverse topological order
//! because a node can only reference nodes created before it.

use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, sigmoid_scalar, softmax_into};
use super::{Scalar, Tensor2D};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a masked per-row term is reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    RowDot(Var, Var),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    Column(Var, usize),
    MulColumn(Var, Var),
    SumAll(Var),
    WeightedSum(Vec<(Var, T)>),
    MaskedBce {
        probs: Var,
        labels: Vec<T>,
        mask: Vec<bool>,
        count: usize,
    },
    MaskedEntropy {
        probs: Var,
        mask: Vec<bool>,
        scale: T,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor2D<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded tensor operations.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    adjoints: Vec<Option<Tensor2D<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            adjoints: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2D<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor2D<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (inputs, fixed data).
    pub fn constant(&mut self, value: Tensor2D<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2D<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Adjoint of `v` after [`Graph::backward`]; `None` when no gradient
    /// reached the node.
    pub fn adjoint(&self, v: Var) -> Option<&Tensor2D<T>> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            left: self.shape(a),
            right: self.shape(b),
        }
    }

    /// Evaluates `op` and appends it to the tape.
    fn record(&mut self, op: Op<T>, shape: (usize, usize), inputs: &[Var]) -> Var {
        let mut value = Tensor2D::zeros(shape.0, shape.1);
        forward_op(&self.nodes, &op, &mut value);
        let rg = self.needs(inputs);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        Ok(self.record(Op::MatMul(a, b), (m, n), &[a, b]))
    }

    /// Adds a `1×n` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(a);
        if self.shape(bias) != (1, shape.1) {
            return Err(self.dim_err("add_bias", a, bias));
        }
        Ok(self.record(Op::AddBias(a, bias), shape, &[a, bias]))
    }

    /// `input · weight + bias`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let z = self.matmul(input, weight)?;
        self.add_bias(z, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("add", a, b));
        }
        Ok(self.record(Op::Add(a, b), self.shape(a), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("mul", a, b));
        }
        Ok(self.record(Op::Mul(a, b), self.shape(a), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.record(Op::Scale(a, c), self.shape(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record(Op::Relu(a), self.shape(a), &[a])
    }

    /// Clamped logistic; the clamp has zero derivative.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.record(Op::Sigmoid(a), self.shape(a), &[a])
    }

    /// Per-row dot product of two equally shaped matrices; `b×d → b×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("row_dot", a, b));
        }
        Ok(self.record(Op::RowDot(a, b), (self.shape(a).0, 1), &[a, b]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Domain("concat of zero tensors".into()));
        };
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(self.dim_err("concat_cols", first, p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        Ok(self.record(Op::ConcatCols(parts.to_vec()), (rows, cols), parts))
    }

    /// Softmax across the columns of each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).1 == 0 {
            return Err(Error::Domain("softmax of an empty vector".into()));
        }
        Ok(self.record(Op::SoftmaxRows(a), self.shape(a), &[a]))
    }

    /// Column `j` as a `b×1` matrix.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if j >= c {
            return Err(Error::Dimension {
                op: "column",
                left: (r, c),
                right: (r, j + 1),
            });
        }
        Ok(self.record(Op::Column(a, j), (r, 1), &[a]))
    }

    /// Scales row `i` of `a` by `weights[i, 0]`.
    pub fn mul_column(&mut self, a: Var, weights: Var) -> Result<Var> {
        if self.shape(weights) != (self.shape(a).0, 1) {
            return Err(self.dim_err("mul_column", a, weights));
        }
        Ok(self.record(Op::MulColumn(a, weights), self.shape(a), &[a, weights]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.record(Op::SumAll(a), (1, 1), &[a])
    }

    /// `Σ cᵢ · aᵢ` over equally shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Ok(self.constant(Tensor2D::scalar(T::zero())));
        };
        let shape = self.shape(first);
        for &(v, _) in terms {
            if self.shape(v) != shape {
                return Err(self.dim_err("weighted_sum", first, v));
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.record(Op::WeightedSum(terms.to_vec()), shape, &vars))
    }

    /// Mean binary cross-entropy over rows with `mask = true`.
    ///
    /// `probs` is a `b×1` matrix of clamped probabilities. Labels at masked-out
    /// rows are never read; a non-binary label at an observed row panics, so
    /// a poisoned (NaN) sentinel leaking through a wrong mask is caught.
    pub fn masked_bce(&mut self, probs: Var, labels: &[T], mask: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(probs);
        if c != 1 || labels.len() != r || mask.len() != r {
            return Err(Error::Dimension {
                op: "masked_bce",
                left: (r, c),
                right: (labels.len(), mask.len()),
            });
        }
        let mut kept = vec![T::zero(); r];
        for i in (0..r).filter(|&i| mask[i]) {
            let y = labels[i];
            assert!(
                y == T::zero() || y == T::one(),
                "label at observed row {i} is {y}, expected 0 or 1"
            );
            kept[i] = y;
        }
        let count = mask.iter().filter(|&&m| m).count();
        let op = Op::MaskedBce {
            probs,
            labels: kept,
            mask: mask.to_vec(),
            count,
        };
        let inputs: &[Var] = if count > 0 { &[probs] } else { &[] };
        Ok(self.record(op, (1, 1), inputs))
    }

    /// Binary entropy summed (or averaged) over rows with `mask = false`.
    pub fn masked_entropy(
        &mut self,
        probs: Var,
        mask: &[bool],
        reduction: Reduction,
    ) -> Result<Var> {
        let (r, c) = self.shape(probs);
        if c != 1 || mask.len() != r {
            return Err(Error::Dimension {
                op: "masked_entropy",
                left: (r, c),
                right: (mask.len(), 1),
            });
        }
        let unlabeled = mask.iter().filter(|&&m| !m).count();
        let scale = match reduction {
            Reduction::Sum => T::one(),
            Reduction::Mean if unlabeled > 0 => T::one() / T::of(unlabeled as f64),
            Reduction::Mean => T::zero(),
        };
        let op = Op::MaskedEntropy {
            probs,
            mask: mask.to_vec(),
            scale,
        };
        let inputs: &[Var] = if unlabeled > 0 { &[probs] } else { &[] };
        Ok(self.record(op, (1, 1), inputs))
    }

    /// Overwrites the value of a leaf in place. Nodes computed from it keep
    /// their old values until [`Graph::reevaluate`] runs.
    pub fn leaf_value_mut(&mut self, v: Var) -> Result<&mut Tensor2D<T>> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract(format!("node {} is not a leaf", v.0)));
        }
        Ok(&mut node.value)
    }

    /// Every node whose value depends on `v`, in tape order, excluding `v`.
    pub fn dependents(&self, v: Var) -> Vec<Var> {
        let mut dirty = vec![false; self.nodes.len()];
        dirty[v.0] = true;
        let mut out = Vec::new();
        for idx in v.0 + 1..self.nodes.len() {
            if op_inputs(&self.nodes[idx].op).iter().any(|i| dirty[i.0]) {
                dirty[idx] = true;
                out.push(Var(idx));
            }
        }
        out
    }

    /// Recomputes the values of `nodes` (in tape order) from their inputs,
    /// reusing their buffers. Pair with [`Graph::dependents`] after editing
    /// a leaf; the result is bit-identical to rebuilding the tape.
    pub fn reevaluate(&mut self, nodes: &[Var]) {
        for &v in nodes {
            let (before, rest) = self.nodes.split_at_mut(v.0);
            let node = &mut rest[0];
            forward_op(before, &node.op, &mut node.value);
        }
    }

    /// Reverse sweep from a scalar root. Adjoints accumulate across fan-out.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward from a non-scalar root of shape {:?}",
                self.shape(root)
            )));
        }
        self.adjoints = vec![None; self.nodes.len()];
        self.adjoints[root.0] = Some(Tensor2D::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = self.adjoints[idx].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.adjoints, idx, &upstream);
            self.adjoints[idx] = Some(upstream);
        }
        Ok(())
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => Vec::new(),
        &Op::MatMul(a, b)
        | &Op::AddBias(a, b)
        | &Op::Add(a, b)
        | &Op::Mul(a, b)
        | &Op::RowDot(a, b)
        | &Op::MulColumn(a, b) => vec![a, b],
        &Op::Scale(a, _)
        | &Op::Relu(a)
        | &Op::Sigmoid(a)
        | &Op::SoftmaxRows(a)
        | &Op::Column(a, _)
        | &Op::SumAll(a) => vec![a],
        Op::ConcatCols(parts) => parts.clone(),
        Op::WeightedSum(terms) => terms.iter().map(|t| t.0).collect(),
        Op::MaskedBce { probs, .. } | Op::MaskedEntropy { probs, .. } => vec![*probs],
    }
}

/// Writes the value of `op` into `out`, which already has the output shape.
/// `nodes` holds at least every input of `op`.
fn forward_op<T: Scalar>(nodes: &[Node<T>], op: &Op<T>, out: &mut Tensor2D<T>) {
    let value = |v: Var| &nodes[v.0].value;
    let (rows, cols) = out.shape();
    let elementwise = |out: &mut Tensor2D<T>, a: Var, f: &dyn Fn(T) -> T| {
        for (o, &x) in out.data_mut().iter_mut().zip(value(a).data()) {
            *o = f(x);
        }
    };
    let zip_with = |out: &mut Tensor2D<T>, a: Var, b: Var, f: &dyn Fn(T, T) -> T| {
        let pairs = value(a).data().iter().zip(value(b).data());
        for (o, (&x, &y)) in out.data_mut().iter_mut().zip(pairs) {
            *o = f(x, y);
        }
    };
    match op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            out.data_mut().iter_mut().for_each(|o| *o = T::zero());
            let k = value(a).cols();
            matmul_into(value(a).data(), value(b).data(), out.data_mut(), rows, k, cols);
        }
        &Op::AddBias(a, bias) => {
            let b = value(bias).data();
            for i in 0..rows {
                let src = value(a).row(i);
                for ((o, &x), &bv) in out.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src).zip(b) {
                    *o = x + bv;
                }
            }
        }
        &Op::Add(a, b) => zip_with(out, a, b, &|x, y| x + y),
        &Op::Mul(a, b) => zip_with(out, a, b, &|x, y| x * y),
        &Op::Scale(a, c) => elementwise(out, a, &|x| x * c),
        &Op::Relu(a) => elementwise(out, a, &|x| x.max(T::zero())),
        &Op::Sigmoid(a) => elementwise(out, a, &sigmoid_scalar),
        &Op::RowDot(a, b) => {
            let (av, bv) = (value(a), value(b));
            for i in 0..rows {
                out.data_mut()[i] = av.row(i).iter().zip(bv.row(i)).map(|(&x, &y)| x * y).sum();
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let c = value(p).cols();
                for i in 0..rows {
                    out.data_mut()[i * cols + offset..i * cols + offset + c].copy_from_slice(value(p).row(i));
                }
                offset += c;
            }
        }
        &Op::SoftmaxRows(a) => {
            for i in 0..rows {
                softmax_into(value(a).row(i), &mut out.data_mut()[i * cols..(i + 1) * cols]);
            }
        }
        &Op::Column(a, j) => {
            for i in 0..rows {
                out.data_mut()[i] = value(a).get(i, j);
            }
        }
        &Op::MulColumn(a, w) => {
            for i in 0..rows {
                let wi = value(w).get(i, 0);
                for (o, &x) in out.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(value(a).row(i)) {
                    *o = x * wi;
                }
            }
        }
        &Op::SumAll(a) => out.data_mut()[0] = value(a).sum(),
        Op::WeightedSum(terms) => {
            out.data_mut().iter_mut().for_each(|o| *o = T::zero());
            for &(v, c) in terms {
                for (o, &x) in out.data_mut().iter_mut().zip(value(v).data()) {
                    *o += c * x;
                }
            }
        }
        Op::MaskedBce {
            probs,
            labels,
            mask,
            count,
        } => {
            let p = value(*probs).data();
            let mut total = T::zero();
            for i in (0..p.len()).filter(|&i| mask[i]) {
                let y = labels[i];
                total -= y * p[i].ln() + (T::one() - y) * (T::one() - p[i]).ln();
            }
            out.data_mut()[0] = if *count == 0 {
                T::zero()
            } else {
                total / T::of(*count as f64)
            };
        }
        Op::MaskedEntropy { probs, mask, scale } => {
            let p = value(*probs).data();
            let mut total = T::zero();
            for i in (0..p.len()).filter(|&i| !mask[i]) {
                total += binary_entropy(p[i]);
            }
            out.data_mut()[0] = total * *scale;
        }
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    adjoints: &mut [Option<Tensor2D<T>>],
    target: Var,
    f: impl FnOnce(&mut Tensor2D<T>),
) {
    let node = &nodes[target.0];
    if !node.requires_grad {
        return;
    }
    let (r, c) = node.value.shape();
    let slot = adjoints[target.0].get_or_insert_with(|| Tensor2D::zeros(r, c));
    f(slot);
}

fn propagate<T: Scalar>(
    nodes: &[Node<T>],
    adjoints: &mut [Option<Tensor2D<T>>],
    idx: usize,
    g: &Tensor2D<T>,
) {
    let value = |v: Var| &nodes[v.0].value;
    let shape = |v: Var| nodes[v.0].value.shape();
    let wants = |v: Var| nodes[v.0].requires_grad;
    match &nodes[idx].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = shape(a);
            let n = shape(b).1;
            if wants(a) {
                let bv = value(b).data();
                accumulate(nodes, adjoints, a, |ga| {
                    matmul_bt_into(g.data(), bv, ga.data_mut(), m, n, k)
                });
            }
            if wants(b) {
                let av = value(a).data();
                accumulate(nodes, adjoints, b, |gb| {
                    matmul_at_into(av, g.data(), gb.data_mut(), m, k, n)
                });
            }
        }
        &Op::AddBias(a, bias) => {
            accumulate(nodes, adjoints, a, |ga| add_into(ga, g));
            let (r, c) = g.shape();
            accumulate(nodes, adjoints, bias, |gb| {
                for i in 0..r {
                    for (o, &x) in gb.data_mut().iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
                        *o += x;
                    }
                }
            });
        }
        &Op::Add(a, b) => {
            accumulate(nodes, adjoints, a, |ga| add_into(ga, g));
            accumulate(nodes, adjoints, b, |gb| add_into(gb, g));
        }
        &Op::Mul(a, b) => {
            let av = value(a);
            let bv = value(b);
            accumulate(nodes, adjoints, a, |ga| {
                for ((o, &x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *o += x * y;
                }
            });
            accumulate(nodes, adjoints, b, |gb| {
                for ((o, &x), &y) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *o += x * y;
                }
            });
        }
        &Op::Scale(a, c) => accumulate(nodes, adjoints, a, |ga| {
            for (o, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                *o += c * x;
            }
        }),
        &Op::Relu(a) => {
            let out = nodes[idx].value.data();
            accumulate(nodes, adjoints, a, |ga| {
                for ((o, &x), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(out) {
                    if y > T::zero() {
                        *o += x;
                    }
                }
            });
        }
        &Op::Sigmoid(a) => {
            let out = nodes[idx].value.data();
            let eps = T::prob_eps();
            accumulate(nodes, adjoints, a, |ga| {
                for ((o, &x), &s) in ga.data_mut().iter_mut().zip(g.data()).zip(out) {
                    if s > eps && s < T::one() - eps {
                        *o += x * s * (T::one() - s);
                    }
                }
            });
        }
        &Op::RowDot(a, b) => {
            let (r, c) = shape(a);
            let av = value(a);
            let bv = value(b);
            accumulate(nodes, adjoints, a, |ga| {
                for i in 0..r {
                    let gi = g.data()[i];
                    for j in 0..c {
                        ga.data_mut()[i * c + j] += gi * bv.data()[i * c + j];
                    }
                }
            });
            accumulate(nodes, adjoints, b, |gb| {
                for i in 0..r {
                    let gi = g.data()[i];
                    for j in 0..c {
                        gb.data_mut()[i * c + j] += gi * av.data()[i * c + j];
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = g.cols();
            let mut offset = 0;
            for &p in parts {
                let (r, c) = shape(p);
                accumulate(nodes, adjoints, p, |gp| {
                    for i in 0..r {
                        for j in 0..c {
                            gp.data_mut()[i * c + j] += g.data()[i * total + offset + j];
                        }
                    }
                });
                offset += c;
            }
        }
        &Op::SoftmaxRows(a) => {
            let y = &nodes[idx].value;
            let (r, c) = y.shape();
            accumulate(nodes, adjoints, a, |ga| {
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        ga.data_mut()[i * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        &Op::Column(a, j) => {
            let c = shape(a).1;
            accumulate(nodes, adjoints, a, |ga| {
                for (i, &x) in g.data().iter().enumerate() {
                    ga.data_mut()[i * c + j] += x;
                }
            });
        }
        &Op::MulColumn(a, w) => {
            let (r, c) = shape(a);
            let av = value(a);
            let wv = value(w);
            accumulate(nodes, adjoints, a, |ga| {
                for i in 0..r {
                    let wi = wv.data()[i];
                    for j in 0..c {
                        ga.data_mut()[i * c + j] += g.data()[i * c + j] * wi;
                    }
                }
            });
            accumulate(nodes, adjoints, w, |gw| {
                for i in 0..r {
                    let mut acc = T::zero();
                    for j in 0..c {
                        acc += g.data()[i * c + j] * av.data()[i * c + j];
                    }
                    gw.data_mut()[i] += acc;
                }
            });
        }
        &Op::SumAll(a) => {
            let gi = g.item();
            accumulate(nodes, adjoints, a, |ga| {
                for o in ga.data_mut() {
                    *o += gi;
                }
            });
        }
        Op::WeightedSum(terms) => {
            for &(v, c) in terms {
                accumulate(nodes, adjoints, v, |gv| {
                    for (o, &x) in gv.data_mut().iter_mut().zip(g.data()) {
                        *o += c * x;
                    }
                });
            }
        }
        Op::MaskedBce {
            probs,
            labels,
            mask,
            count,
        } => {
            let p = value(*probs).data();
            let scale = g.item() / T::of(*count as f64);
            accumulate(nodes, adjoints, *probs, |gp| {
                for i in 0..p.len() {
                    if mask[i] {
                        let y = labels[i];
                        gp.data_mut()[i] += scale * ((T::one() - y) / (T::one() - p[i]) - y / p[i]);
                    }
                }
            });
        }
        Op::MaskedEntropy { probs, mask, scale } => {
            let p = value(*probs).data();
            let s = g.item() * *scale;
            accumulate(nodes, adjoints, *probs, |gp| {
                for i in 0..p.len() {
                    if !mask[i] {
                        gp.data_mut()[i] += s * ((T::one() - p[i]) / p[i]).ln();
                    }
                }
            });
        }
    }
}

fn add_into<T: Scalar>(dst: &mut Tensor2D<T>, src: &Tensor2D<T>) {
    for (o, &x) in dst.data_mut().iter_mut().zip(src.data()) {
        *o += x;
    }
}

/// `H(p) = −p ln p − (1−p) ln(1−p)` in nats.
pub fn binary_entropy<T: Scalar>(p: T) -> T {
    let q = T::one() - p;
    -(p * p.ln() + q * q.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor2D<f64> {
        Tensor2D::from_rows(rows).unwrap()
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor2D::scalar(0.0));
        let y = g.sigmoid(x);
        g.backward(y).unwrap();
        assert_eq!(g.adjoint(x).unwrap().item(), 0.25);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let v = g.leaf(t(&[vec![1.0, -2.0, 3.5, 0.0]]));
        let s = g.sum_all(v);
        g.backward(s).unwrap();
        assert_eq!(g.adjoint(v).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x * x + x  →  dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(Tensor2D::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.adjoint(x).unwrap().item(), 7.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor2D::zeros(2, 1));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut g = Graph::new();
        let x = g.constant(t(&[vec![1.0, 2.0]]));
        let w = g.leaf(t(&[vec![0.5], vec![-1.0]]));
        let y = g.matmul(x, w).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert!(g.adjoint(x).is_none());
        assert_eq!(g.adjoint(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn masked_bce_half_probability() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor2D::column_vector(vec![0.5, 0.5, 0.5]));
        let l = g
            .masked_bce(p, &[1.0, 0.0, f64::NAN], &[true, true, false])
            .unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        g.backward(l).unwrap();
        let grad = g.adjoint(p).unwrap();
        assert_eq!(grad.data()[2], 0.0);
    }

    #[test]
    #[should_panic(expected = "expected 0 or 1")]
    fn masked_bce_trips_on_poisoned_label() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor2D::column_vector(vec![0.5]));
        let _ = g.masked_bce(p, &[f64::NAN], &[true]);
    }

    #[test]
    fn masked_terms_with_nothing_selected_are_zero() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor2D::column_vector(vec![0.3, 0.7]));
        let bce = g
            .masked_bce(p, &[f64::NAN, f64::NAN], &[false, false])
            .unwrap();
        let ent = g.masked_entropy(p, &[true, true], Reduction::Mean).unwrap();
        assert_eq!(g.value(bce).item(), 0.0);
        assert_eq!(g.value(ent).item(), 0.0);
        let total = g.weighted_sum(&[(bce, 1.0), (ent, 1.0)]).unwrap();
        g.backward(total).unwrap();
        assert!(g.adjoint(p).is_none());
    }

    #[test]
    fn entropy_gradient_vanishes_at_half() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor2D::column_vector(vec![0.5]));
        let h = g.masked_entropy(p, &[false], Reduction::Sum).unwrap();
        assert!((g.value(h).item() - 2f64.ln()).abs() < 1e-15);
        g.backward(h).unwrap();
        assert_eq!(g.adjoint(p).unwrap().item(), 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[vec![0.1, 2.0, -1.0], vec![5.0, 5.0, 5.0]]));
        let s = g.softmax_rows(a).unwrap();
        for i in 0..2 {
            let total: f64 = g.value(s).row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!((g.value(s).get(1, 0) - 1.0 / 3.0).abs() < 1e-15);
    }
}
