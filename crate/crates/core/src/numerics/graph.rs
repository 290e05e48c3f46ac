//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, which is always a topological
//! order, so forward evaluation is a single ascending sweep and backward a
//! single descending one. Leaves are bound by name at `forward` time.

use std::collections::{BTreeMap, HashMap};

use super::tensor::{axis_split, matmul_nn, matmul_nt, matmul_tn, Tensor};
use super::NumericsError;

/// Clamp applied inside the BCE logarithms.
pub const LOG_CLAMP: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Named tensors keyed by leaf name; used for parameters and gradients.
pub type TensorMap = BTreeMap<String, Tensor>;

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: String, trainable: bool },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Abs(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Affine { x: NodeId, scale: f64, shift: f64 },
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, eps: f64 },
    L2Normalize(NodeId),
    Cosine(NodeId, NodeId),
    Transpose(NodeId),
    Reshape { x: NodeId, shape: Vec<usize> },
    MaxReduce { x: NodeId, axis: usize },
    MeanReduce { x: NodeId, axis: usize },
    SumReduce { x: NodeId, axis: usize },
    SumAll(NodeId),
    ArgmaxSqDist { x: NodeId, width: usize, height: usize },
    BceWithLogits { logits: NodeId, targets: NodeId },
    Norm(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Abs(..) => "abs",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Affine { .. } => "affine",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Cosine(..) => "cosine",
            Op::Transpose(..) => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::MaxReduce { .. } => "max_reduce",
            Op::MeanReduce { .. } => "mean_reduce",
            Op::SumReduce { .. } => "sum_reduce",
            Op::SumAll(..) => "sum_all",
            Op::ArgmaxSqDist { .. } => "argmax_sq_dist",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Norm(..) => "norm",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::BceWithLogits { logits, targets } => vec![*logits, *targets],
            Op::Abs(x)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::L2Normalize(x)
            | Op::Transpose(x)
            | Op::SumAll(x)
            | Op::Norm(x) => vec![*x],
            Op::Affine { x, .. }
            | Op::Softmax { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::Reshape { x, .. }
            | Op::MaxReduce { x, .. }
            | Op::MeanReduce { x, .. }
            | Op::SumReduce { x, .. }
            | Op::ArgmaxSqDist { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. } => vec![*x],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    /// Per-op forward cache (norms, inverse std-devs, argmax positions).
    aux: Vec<f64>,
    argmax: Vec<usize>,
}

/// Name → tensor bindings for one forward evaluation.
#[derive(Default)]
pub struct Bindings<'a> {
    map: HashMap<&'a str, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: &'a str, tensor: &'a Tensor) -> Self {
        self.map.insert(name, tensor);
        self
    }

    pub fn insert(&mut self, name: &'a str, tensor: &'a Tensor) {
        self.map.insert(name, tensor);
    }

    /// Binds every entry of a parameter map.
    pub fn bind_all(mut self, params: &'a TensorMap) -> Self {
        for (k, v) in params {
            self.map.insert(k.as_str(), v);
        }
        self
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(Node {
            op,
            value: None,
            aux: Vec::new(),
            argmax: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: &str, trainable: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(Op::Leaf {
            name: name.to_string(),
            trainable,
        });
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Non-trainable named input.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, false)
    }

    /// Trainable named leaf; `backward` reports its gradient.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.leaf(name, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    /// Elementwise; `b` may be a scalar or broadcast along leading axes of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Abs(x))
    }
    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Gelu(x))
    }
    /// `scale · x + shift`
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        self.push(Op::Affine { x, scale, shift })
    }
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::Softmax { x, axis })
    }
    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { x, eps })
    }
    /// Unit L2 norm along the last axis; all-zero slices stay zero.
    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        self.push(Op::L2Normalize(x))
    }
    /// Cosine similarity between every row of `a [n,d]` and every row of
    /// `b [m,d]`, giving `[n,m]`. Zero-norm rows yield 0.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Cosine(a, b))
    }
    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Transpose(x))
    }
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape {
            x,
            shape: shape.to_vec(),
        })
    }
    /// Max over `axis`; ties resolve to the smallest index.
    pub fn max_reduce(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::MaxReduce { x, axis })
    }
    pub fn mean_reduce(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::MeanReduce { x, axis })
    }
    pub fn sum_reduce(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::SumReduce { x, axis })
    }
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumAll(x))
    }
    /// For a `[width·height, n]` map, or a `[b, width·height, n]` stack of
    /// them (cell index `i·height + j`), the squared
    /// grid distance of every cell to its channel's argmax. Carries no
    /// gradient: the argmax is a constant of the backward pass.
    pub fn argmax_sq_dist(&mut self, x: NodeId, width: usize, height: usize) -> NodeId {
        self.push(Op::ArgmaxSqDist { x, width, height })
    }
    /// Summed binary cross-entropy of `sigmoid(logits)` against `targets`.
    /// Targets are treated as constants.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::BceWithLogits { logits, targets })
    }
    /// Euclidean norm of all entries.
    pub fn norm(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Norm(x))
    }
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::ConcatRows(xs.to_vec()))
    }
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::ConcatCols(xs.to_vec()))
    }
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceRows { x, start, len })
    }
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols { x, start, len })
    }

    /// Cached value of a node from the latest forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    /// Argmax positions recorded by a `max_reduce` node.
    pub fn argmax(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].argmax
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("parent evaluated before child")
    }

    fn ancestors(&self, output: NodeId) -> Vec<bool> {
        let mut needed = vec![false; output.0 + 1];
        needed[output.0] = true;
        for i in (0..=output.0).rev() {
            if needed[i] {
                for p in self.nodes[i].op.parents() {
                    needed[p.0] = true;
                }
            }
        }
        needed
    }

    /// Evaluates every ancestor of `output`, caching intermediates for
    /// `backward`, and returns the output value.
    pub fn forward(&mut self, bindings: &Bindings, output: NodeId) -> Result<Tensor, NumericsError> {
        for node in &mut self.nodes {
            node.value = None;
        }
        let needed = self.ancestors(output);
        for i in 0..=output.0 {
            if !needed[i] {
                continue;
            }
            let (value, aux, argmax) = self.eval_node(i, bindings)?;
            if !value.is_finite() {
                return Err(NumericsError::NonFinite {
                    op: self.nodes[i].op.name().to_string(),
                });
            }
            let node = &mut self.nodes[i];
            node.value = Some(value);
            node.aux = aux;
            node.argmax = argmax;
        }
        Ok(self.val(output).clone())
    }

    fn eval_node(
        &self,
        i: usize,
        bindings: &Bindings,
    ) -> Result<(Tensor, Vec<f64>, Vec<usize>), NumericsError> {
        let op = &self.nodes[i].op;
        let name = op.name();
        let mut aux = Vec::new();
        let mut argmax = Vec::new();
        let value = match op {
            Op::Leaf { name, .. } => {
                let t = bindings
                    .map
                    .get(name.as_str())
                    .ok_or_else(|| NumericsError::UnboundInput(name.clone()))?;
                if !t.is_finite() {
                    return Err(NumericsError::NonFinite {
                        op: format!("input `{name}`"),
                    });
                }
                (*t).clone()
            }
            Op::MatMul(a, b) => self.val(*a).matmul(self.val(*b))?,
            Op::Add(a, b) => binary(name, self.val(*a), self.val(*b), |x, y| x + y)?,
            Op::Sub(a, b) => binary(name, self.val(*a), self.val(*b), |x, y| x - y)?,
            Op::Mul(a, b) => binary(name, self.val(*a), self.val(*b), |x, y| x * y)?,
            Op::Abs(x) => self.val(*x).map(f64::abs),
            Op::Sigmoid(x) => self.val(*x).map(sigmoid),
            Op::Gelu(x) => self.val(*x).map(gelu),
            Op::Affine { x, scale, shift } => self.val(*x).map(|v| scale * v + shift),
            Op::Softmax { x, axis } => {
                let t = self.val(*x);
                check_axis(name, t, *axis)?;
                softmax(t, *axis)
            }
            Op::LayerNorm { x, eps } => {
                let t = self.val(*x);
                check_rank_min(name, t, 1)?;
                let d = *t.shape().last().unwrap();
                let mut out = vec![0.0; t.len()];
                for (r, chunk) in t.data().chunks(d).enumerate() {
                    let mean = chunk.iter().sum::<f64>() / d as f64;
                    let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    aux.push(inv);
                    for (k, v) in chunk.iter().enumerate() {
                        out[r * d + k] = (v - mean) * inv;
                    }
                }
                Tensor::from_parts(t.shape().to_vec(), out)
            }
            Op::L2Normalize(x) => {
                let t = self.val(*x);
                check_rank_min(name, t, 1)?;
                let d = *t.shape().last().unwrap();
                let mut out = vec![0.0; t.len()];
                for (r, chunk) in t.data().chunks(d).enumerate() {
                    let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
                    aux.push(n);
                    if n > NORM_EPS {
                        for (k, v) in chunk.iter().enumerate() {
                            out[r * d + k] = v / n;
                        }
                    }
                }
                Tensor::from_parts(t.shape().to_vec(), out)
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (n, d) = ta.dims2(name)?;
                let (m, d2) = tb.dims2(name)?;
                if d != d2 {
                    return Err(NumericsError::shape(name, ta.shape(), tb.shape()));
                }
                let (ua, na) = unit_rows(ta.data(), n, d);
                let (ub, nb) = unit_rows(tb.data(), m, d);
                aux.extend_from_slice(&na);
                aux.extend_from_slice(&nb);
                Tensor::from_parts(vec![n, m], matmul_nt(&ua, &ub, n, d, m))
            }
            Op::Transpose(x) => self.val(*x).transpose()?,
            Op::Reshape { x, shape } => {
                let t = self.val(*x);
                if shape.iter().product::<usize>() != t.len() {
                    return Err(NumericsError::shape(name, t.shape(), shape));
                }
                Tensor::from_parts(shape.clone(), t.data().to_vec())
            }
            Op::MaxReduce { x, axis } => {
                let t = self.val(*x);
                check_axis(name, t, *axis)?;
                let (outer, n, inner) = axis_split(t.shape(), *axis);
                let mut out = vec![0.0; outer * inner];
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for k in 0..inner {
                        let mut best = 0;
                        let mut bv = t.data()[o * n * inner + k];
                        for a in 1..n {
                            let v = t.data()[(o * n + a) * inner + k];
                            if v > bv {
                                bv = v;
                                best = a;
                            }
                        }
                        out[o * inner + k] = bv;
                        argmax[o * inner + k] = best;
                    }
                }
                Tensor::from_parts(reduced_shape(t.shape(), *axis), out)
            }
            Op::MeanReduce { x, axis } | Op::SumReduce { x, axis } => {
                let t = self.val(*x);
                check_axis(name, t, *axis)?;
                let (outer, n, inner) = axis_split(t.shape(), *axis);
                let scale = if matches!(op, Op::MeanReduce { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for a in 0..n {
                        for k in 0..inner {
                            out[o * inner + k] += t.data()[(o * n + a) * inner + k];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v *= scale);
                Tensor::from_parts(reduced_shape(t.shape(), *axis), out)
            }
            Op::SumAll(x) => Tensor::scalar(self.val(*x).sum()),
            Op::ArgmaxSqDist { x, width, height } => {
                let t = self.val(*x);
                let (maps, cells, n) = match t.shape() {
                    [c, n] => (1, *c, *n),
                    [b, c, n] => (*b, *c, *n),
                    _ => {
                        return Err(NumericsError::Rank {
                            op: name.into(),
                            expected: 3,
                            shape: t.shape().to_vec(),
                        })
                    }
                };
                if cells != width * height {
                    return Err(NumericsError::shape(name, t.shape(), &[maps, width * height, n]));
                }
                let mut out = vec![0.0; t.len()];
                for m in 0..maps {
                    let d = &t.data()[m * cells * n..(m + 1) * cells * n];
                    let o = &mut out[m * cells * n..(m + 1) * cells * n];
                    for k in 0..n {
                        let mut best = 0;
                        for c in 1..cells {
                            if d[c * n + k] > d[best * n + k] {
                                best = c;
                            }
                        }
                        let (bi, bj) = ((best / height) as f64, (best % height) as f64);
                        for c in 0..cells {
                            let (ci, cj) = ((c / height) as f64, (c % height) as f64);
                            o[c * n + k] = (ci - bi).powi(2) + (cj - bj).powi(2);
                        }
                    }
                }
                Tensor::from_parts(t.shape().to_vec(), out)
            }
            Op::BceWithLogits { logits, targets } => {
                let (l, t) = (self.val(*logits), self.val(*targets));
                if l.shape() != t.shape() {
                    return Err(NumericsError::shape(name, l.shape(), t.shape()));
                }
                let total = l
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&r, &y)| bce_term(r, y))
                    .sum();
                Tensor::scalar(total)
            }
            Op::Norm(x) => Tensor::scalar(self.val(*x).l2_norm()),
            Op::ConcatRows(xs) => {
                let first = self.val(xs[0]);
                let (_, cols) = first.dims2(name)?;
                let mut rows = 0;
                let mut data = Vec::new();
                for x in xs {
                    let t = self.val(*x);
                    let (r, c) = t.dims2(name)?;
                    if c != cols {
                        return Err(NumericsError::shape(name, first.shape(), t.shape()));
                    }
                    rows += r;
                    data.extend_from_slice(t.data());
                }
                Tensor::from_parts(vec![rows, cols], data)
            }
            Op::ConcatCols(xs) => {
                let first = self.val(xs[0]);
                let (rows, _) = first.dims2(name)?;
                let mut widths = Vec::with_capacity(xs.len());
                for x in xs {
                    let t = self.val(*x);
                    let (r, c) = t.dims2(name)?;
                    if r != rows {
                        return Err(NumericsError::shape(name, first.shape(), t.shape()));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = vec![0.0; rows * total];
                let mut off = 0;
                for (x, w) in xs.iter().zip(&widths) {
                    let t = self.val(*x);
                    for r in 0..rows {
                        data[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
                    }
                    off += w;
                }
                Tensor::from_parts(vec![rows, total], data)
            }
            Op::SliceRows { x, start, len } => {
                let t = self.val(*x);
                let (rows, cols) = t.dims2(name)?;
                if start + len > rows {
                    return Err(NumericsError::shape(name, t.shape(), &[start + len, cols]));
                }
                Tensor::from_parts(
                    vec![*len, cols],
                    t.data()[start * cols..(start + len) * cols].to_vec(),
                )
            }
            Op::SliceCols { x, start, len } => {
                let t = self.val(*x);
                let (rows, cols) = t.dims2(name)?;
                if start + len > cols {
                    return Err(NumericsError::shape(name, t.shape(), &[rows, start + len]));
                }
                let mut data = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    data.extend_from_slice(&t.row(r)[*start..start + len]);
                }
                Tensor::from_parts(vec![rows, *len], data)
            }
        };
        Ok((value, aux, argmax))
    }

    /// Propagates `seed` (the gradient of some scalar with respect to
    /// `output`) back to every trainable leaf reached by the last forward.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<TensorMap, NumericsError> {
        let out_val = self
            .value(output)
            .ok_or(NumericsError::BackwardBeforeForward)?;
        if out_val.shape() != seed.shape() {
            return Err(NumericsError::shape("backward seed", out_val.shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.data().to_vec());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.value.is_none() {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let mut out = TensorMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if let (Op::Leaf { name, trainable: true }, Some(v)) = (&node.op, &node.value) {
                let data = grads[i].take().unwrap_or_else(|| vec![0.0; v.len()]);
                out.insert(name.clone(), Tensor::from_parts(v.shape().to_vec(), data));
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.as_ref().unwrap();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                accumulate(grads, *a, matmul_nt(g, tb.data(), m, n, k));
                accumulate(grads, *b, matmul_tn(ta.data(), g, m, k, n));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                accumulate(grads, *a, g.to_vec());
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let blen = self.val(*b).len();
                let mut gb = vec![0.0; blen];
                for (idx, gv) in g.iter().enumerate() {
                    gb[idx % blen] += sign * gv;
                }
                accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let blen = tb.len();
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; blen];
                for (idx, gv) in g.iter().enumerate() {
                    ga[idx] = gv * tb.data()[idx % blen];
                    gb[idx % blen] += gv * ta.data()[idx];
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Abs(x) => {
                let tx = self.val(*x);
                let gx = g
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else if *xv < 0.0 { -gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(y.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let tx = self.val(*x);
                let gx = g.iter().zip(tx.data()).map(|(gv, xv)| gv * gelu_grad(*xv)).collect();
                accumulate(grads, *x, gx);
            }
            Op::Affine { x, scale, .. } => {
                accumulate(grads, *x, g.iter().map(|v| v * scale).collect());
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |a: usize| (o * n + a) * inner + k;
                        let dot: f64 = (0..n).map(|a| g[idx(a)] * yd[idx(a)]).sum();
                        for a in 0..n {
                            gx[idx(a)] = yd[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, .. } => {
                let d = *y.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for (r, inv) in node.aux.iter().enumerate() {
                    let gy = &g[r * d..(r + 1) * d];
                    let yy = &y.data()[r * d..(r + 1) * d];
                    let mean_g = gy.iter().sum::<f64>() / d as f64;
                    let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for k in 0..d {
                        gx[r * d + k] = inv * (gy[k] - mean_g - yy[k] * mean_gy);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::L2Normalize(x) => {
                let d = *y.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for (r, &n) in node.aux.iter().enumerate() {
                    if n <= NORM_EPS {
                        continue;
                    }
                    let gy = &g[r * d..(r + 1) * d];
                    let yy = &y.data()[r * d..(r + 1) * d];
                    let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        gx[r * d + k] = (gy[k] - yy[k] * dot) / n;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (n, d) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[0];
                let (na, nb) = node.aux.split_at(n);
                let (ua, _) = unit_rows(ta.data(), n, d);
                let (ub, _) = unit_rows(tb.data(), m, d);
                let c = y.data();
                // dA = (G·B̂ − rowsum(G∘C)·Â) / |a|
                let mut ga = matmul_nn(g, &ub, n, m, d);
                for r in 0..n {
                    if na[r] <= NORM_EPS {
                        ga[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let s: f64 = (0..m).map(|j| g[r * m + j] * c[r * m + j]).sum();
                    for k in 0..d {
                        ga[r * d + k] = (ga[r * d + k] - s * ua[r * d + k]) / na[r];
                    }
                }
                // dB = (Gᵀ·Â − colsum(G∘C)·B̂) / |b|
                let mut gb = matmul_tn(g, &ua, n, m, d);
                for j in 0..m {
                    if nb[j] <= NORM_EPS {
                        gb[j * d..(j + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let s: f64 = (0..n).map(|r| g[r * m + j] * c[r * m + j]).sum();
                    for k in 0..d {
                        gb[j * d + k] = (gb[j * d + k] - s * ub[j * d + k]) / nb[j];
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Transpose(x) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let mut gx = vec![0.0; g.len()];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = g[i * c + j];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Reshape { x, .. } => accumulate(grads, *x, g.to_vec()),
            Op::MaxReduce { x, axis } => {
                let tx = self.val(*x);
                let (_, n, inner) = axis_split(tx.shape(), *axis);
                let mut gx = vec![0.0; tx.len()];
                for (pos, (&gv, &am)) in g.iter().zip(&node.argmax).enumerate() {
                    let (o, k) = (pos / inner, pos % inner);
                    gx[(o * n + am) * inner + k] += gv;
                }
                accumulate(grads, *x, gx);
            }
            Op::MeanReduce { x, axis } | Op::SumReduce { x, axis } => {
                let tx = self.val(*x);
                let (outer, n, inner) = axis_split(tx.shape(), *axis);
                let scale = if matches!(node.op, Op::MeanReduce { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut gx = vec![0.0; tx.len()];
                for o in 0..outer {
                    for a in 0..n {
                        for k in 0..inner {
                            gx[(o * n + a) * inner + k] = g[o * inner + k] * scale;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let len = self.val(*x).len();
                accumulate(grads, *x, vec![g[0]; len]);
            }
            Op::ArgmaxSqDist { .. } => {}
            Op::BceWithLogits { logits, targets } => {
                let (l, t) = (self.val(*logits), self.val(*targets));
                let gx = l
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&r, &y)| g[0] * bce_term_grad(r, y))
                    .collect();
                accumulate(grads, *logits, gx);
            }
            Op::Norm(x) => {
                let tx = self.val(*x);
                let n = y.item();
                if n > NORM_EPS {
                    accumulate(grads, *x, tx.data().iter().map(|v| g[0] * v / n).collect());
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for x in xs {
                    let len = self.val(*x).len();
                    accumulate(grads, *x, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::ConcatCols(xs) => {
                let (rows, total) = (y.shape()[0], y.shape()[1]);
                let mut off = 0;
                for x in xs {
                    let w = self.val(*x).shape()[1];
                    let mut gx = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gx.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    accumulate(grads, *x, gx);
                    off += w;
                }
            }
            Op::SliceRows { x, start, .. } => {
                let tx = self.val(*x);
                let cols = tx.shape()[1];
                let mut gx = vec![0.0; tx.len()];
                gx[start * cols..start * cols + g.len()].copy_from_slice(g);
                accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start, len } => {
                let tx = self.val(*x);
                let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
                let mut gx = vec![0.0; tx.len()];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                accumulate(grads, *x, gx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}

fn binary(op: &str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericsError> {
    let broadcastable = a.shape() == b.shape()
        || b.len() == 1
        || (b.rank() <= a.rank() && a.shape().ends_with(b.shape()));
    if !broadcastable {
        return Err(NumericsError::shape(op, a.shape(), b.shape()));
    }
    let blen = b.len();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data()[i % blen]))
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

fn check_axis(op: &str, t: &Tensor, axis: usize) -> Result<(), NumericsError> {
    if axis >= t.rank() {
        return Err(NumericsError::Axis {
            op: op.into(),
            axis,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_rank_min(op: &str, t: &Tensor, rank: usize) -> Result<(), NumericsError> {
    if t.rank() < rank {
        return Err(NumericsError::Rank {
            op: op.into(),
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != axis)
        .map(|(_, &d)| d)
        .collect()
}

/// Rows scaled to unit norm (zero rows stay zero) plus the original norms.
pub(crate) fn unit_rows(data: &[f64], rows: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * d];
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &data[r * d..(r + 1) * d];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(n);
        if n > NORM_EPS {
            for k in 0..d {
                out[r * d + k] = row[k] / n;
            }
        }
    }
    (out, norms)
}

fn softmax(t: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(t.shape(), axis);
    let d = t.data();
    let mut out = vec![0.0; t.len()];
    for o in 0..outer {
        for k in 0..inner {
            let idx = |a: usize| (o * n + a) * inner + k;
            let max = (0..n).map(|a| d[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for a in 0..n {
                let e = (d[idx(a)] - max).exp();
                out[idx(a)] = e;
                z += e;
            }
            for a in 0..n {
                out[idx(a)] /= z;
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x.powi(3))).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// One BCE term with both logarithms clamped at [`LOG_CLAMP`].
pub fn bce_term(logit: f64, target: f64) -> f64 {
    let floor = LOG_CLAMP.ln();
    let lp = log_sigmoid(logit).max(floor);
    let ln = log_sigmoid(-logit).max(floor);
    -(target * lp + (1.0 - target) * ln)
}

fn bce_term_grad(logit: f64, target: f64) -> f64 {
    let floor = LOG_CLAMP.ln();
    let mut g = 0.0;
    if log_sigmoid(logit) > floor {
        g -= target * (1.0 - sigmoid(logit));
    }
    if log_sigmoid(-logit) > floor {
        g += (1.0 - target) * sigmoid(logit);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central differences of `f` around `x`.
    fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check_unary(build: impl Fn(&mut Graph, NodeId) -> NodeId, x: Tensor) {
        check_with(build, x, &[]);
    }

    fn check_with(build: impl Fn(&mut Graph, NodeId) -> NodeId, x: Tensor, extra: &[(&str, &Tensor)]) {
        let run = |g: &mut Graph, p: &Tensor, loss: NodeId| {
            let mut b = Bindings::new().bind("x", p);
            for (n, t) in extra {
                b.insert(n, t);
            }
            g.forward(&b, loss).unwrap().item()
        };
        let mut g = Graph::new();
        let xi = g.param("x");
        let y = build(&mut g, xi);
        let loss = g.sum_all(y);
        run(&mut g, &x, loss);
        let grads = g.backward(loss, &Tensor::scalar(1.0)).unwrap();
        let mut g2 = g.clone();
        let num = numeric_grad(&x, |p| run(&mut g2, p, loss));
        for (a, n) in grads["x"].data().iter().zip(&num) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.input("i");
        let x = g.input("x");
        let y = g.matmul(i, x);
        let xt = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let id = Tensor::identity(3);
        let out = g.forward(&Bindings::new().bind("i", &id).bind("x", &xt), y).unwrap();
        assert_eq!(out, xt);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.softmax(x, 0);
        let z = Tensor::zeros(&[3]);
        let out = g.forward(&Bindings::new().bind("x", &z), y).unwrap();
        for v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_self_is_one() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.cosine(x, x);
        let u = t(&[1, 4], &[0.3, -1.2, 2.0, 0.5]);
        let out = g.forward(&Bindings::new().bind("x", &u), y).unwrap();
        assert!((out.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.param("x");
        let y = g.sigmoid(x);
        let loss = g.sum_all(y);
        g.forward(&Bindings::new().bind("x", &Tensor::scalar(0.0)), loss).unwrap();
        let grads = g.backward(loss, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["x"].item(), 0.25);
    }

    #[test]
    fn abs_gradient_is_sign() {
        let mut g = Graph::new();
        let x = g.param("x");
        let y = g.abs(x);
        let loss = g.sum_all(y);
        let xv = t(&[2], &[2.0, -3.0]);
        g.forward(&Bindings::new().bind("x", &xv), loss).unwrap();
        let grads = g.backward(loss, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["x"].data(), &[1.0, -1.0]);
    }

    #[test]
    fn backward_before_forward_errors() {
        let mut g = Graph::new();
        let x = g.param("x");
        let y = g.sum_all(x);
        assert!(matches!(
            g.backward(y, &Tensor::scalar(1.0)),
            Err(NumericsError::BackwardBeforeForward)
        ));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let y = g.matmul(a, b);
        let (ta, tb) = (Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3]));
        let err = g.forward(&Bindings::new().bind("a", &ta).bind("b", &tb), y).unwrap_err();
        match err {
            NumericsError::ShapeMismatch { op, shapes } => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unbound_and_non_finite_inputs_error() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.sum_all(x);
        assert!(matches!(
            g.forward(&Bindings::new(), y),
            Err(NumericsError::UnboundInput(name)) if name == "x"
        ));
        let mut bad = Tensor::zeros(&[2]);
        bad.data_mut()[1] = f64::INFINITY;
        assert!(matches!(
            g.forward(&Bindings::new().bind("x", &bad), y),
            Err(NumericsError::NonFinite { .. })
        ));
    }

    #[test]
    fn seed_shape_must_match() {
        let mut g = Graph::new();
        let x = g.param("x");
        let y = g.abs(x);
        g.forward(&Bindings::new().bind("x", &Tensor::zeros(&[3])), y).unwrap();
        assert!(g.backward(y, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn elementwise_gradients() {
        let x = t(&[2, 3], &[0.3, -0.7, 1.1, 0.05, -1.4, 0.9]);
        check_unary(|g, x| g.sigmoid(x), x.clone());
        check_unary(|g, x| g.gelu(x), x.clone());
        check_unary(
            |g, x| {
                let s = g.softmax(x, 1);
                let w = g.mul(s, x);
                g.affine(w, 2.0, 0.5)
            },
            x.clone(),
        );
        check_unary(
            |g, x| {
                let s = g.softmax(x, 0);
                g.mul(s, x)
            },
            x.clone(),
        );
        check_unary(
            |g, x| {
                let n = g.layer_norm(x, 1e-5);
                g.mul(n, x)
            },
            x.clone(),
        );
        check_unary(
            |g, x| {
                let n = g.l2_normalize(x);
                g.mul(n, x)
            },
            x.clone(),
        );
        check_unary(
            |g, x| {
                let tr = g.transpose(x);
                let p = g.matmul(x, tr);
                let q = g.mul(p, p);
                g.mean_reduce(q, 1)
            },
            x.clone(),
        );
        check_unary(
            |g, x| {
                let m = g.max_reduce(x, 0);
                let s = g.sum_reduce(x, 1);
                let a = g.norm(m);
                let b = g.norm(s);
                let ab = g.concat_rows(&[x, x]);
                let c = g.slice_cols(ab, 1, 2);
                let d = g.slice_rows(c, 1, 2);
                let e = g.sum_all(d);
                let f = g.add(a, b);
                g.add(f, e)
            },
            x.clone(),
        );
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let x = t(&[3, 4], &[0.3, 0.7, 1.1, 0.05, 1.4, 0.9, 0.2, 0.1, 0.5, 0.5, 0.8, 1.3]);
        let b = t(&[2, 4], &[0.2, -0.4, 0.9, 0.6, 1.0, 0.1, 0.3, -0.2]);
        check_with(
            |g, x| {
                let bi = g.input("b");
                let c = g.cosine(x, bi);
                let c2 = g.mul(c, c);
                let cb = g.cosine(bi, x);
                let s = g.sum_all(cb);
                g.add(c2, s)
            },
            x.clone(),
            &[("b", &b)],
        );
        // and with respect to the right-hand operand
        let mut g = Graph::new();
        let xi = g.input("x");
        let bi = g.param("b");
        let c = g.cosine(xi, bi);
        let c3 = g.mul(c, c);
        let loss = g.sum_all(c3);
        g.forward(&Bindings::new().bind("x", &x).bind("b", &b), loss).unwrap();
        let grads = g.backward(loss, &Tensor::scalar(1.0)).unwrap();
        let mut g2 = g.clone();
        let num = numeric_grad(&b, |p| {
            g2.forward(&Bindings::new().bind("x", &x).bind("b", p), loss).unwrap().item()
        });
        for (a, n) in grads["b"].data().iter().zip(&num) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
        let _ = c3;
    }

    #[test]
    fn bce_matches_closed_form() {
        assert!((bce_term(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let total = bce_term(25.0, 1.0) + bce_term(-25.0, 0.0);
        let expect = 2.0 * (-25.0f64).exp().ln_1p();
        assert!((total - expect).abs() < 1e-12 * expect);
        assert!((total - 2.78e-11).abs() < 1e-13);
    }

    #[test]
    fn argmax_sq_dist_is_constant_map() {
        let mut g = Graph::new();
        let x = g.input("x");
        let d = g.argmax_sq_dist(x, 1, 2);
        let m = t(&[2, 1], &[10.0, 0.0]);
        let out = g.forward(&Bindings::new().bind("x", &m), d).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0]);
    }
}
