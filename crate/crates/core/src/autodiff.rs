//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one node to a [`Tape`]. Nodes are stored in
//! creation order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep. Leaves created with
//! [`Tape::leaf`] participate in differentiation; [`Tape::constant`] values
//! never receive a gradient and neither does anything computed only from
//! constants.

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, GcrError, Result};
use crate::graphs::{pairwise_backward, pairwise_forward, SimilarityKernel};
use crate::tensor::{matmul_raw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding mode for [`Tape::conv2d`]. Stride is always 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Identifies a primitive's gradient rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRowBias,
    AddChannelBias,
    Scale,
    Shift,
    Relu,
    Square,
    Sum,
    SoftmaxRows,
    CrossEntropy,
    Reshape,
    Conv2d,
    MaxPool2d,
    Pairwise,
    StrictUpper,
    Arccos,
}

impl OpKind {
    const ALL: [(OpKind, &'static str); 21] = [
        (OpKind::Leaf, "leaf"),
        (OpKind::Constant, "constant"),
        (OpKind::MatMul, "matmul"),
        (OpKind::Add, "add"),
        (OpKind::Sub, "sub"),
        (OpKind::Mul, "mul"),
        (OpKind::AddRowBias, "add_row_bias"),
        (OpKind::AddChannelBias, "add_channel_bias"),
        (OpKind::Scale, "scale"),
        (OpKind::Shift, "shift"),
        (OpKind::Relu, "relu"),
        (OpKind::Square, "square"),
        (OpKind::Sum, "sum"),
        (OpKind::SoftmaxRows, "softmax_rows"),
        (OpKind::CrossEntropy, "cross_entropy"),
        (OpKind::Reshape, "reshape"),
        (OpKind::Conv2d, "conv2d"),
        (OpKind::MaxPool2d, "maxpool2d"),
        (OpKind::Pairwise, "pairwise"),
        (OpKind::StrictUpper, "strict_upper"),
        (OpKind::Arccos, "arccos"),
    ];

    pub fn name(self) -> &'static str {
        Self::ALL.iter().find(|(k, _)| *k == self).map(|(_, n)| *n).unwrap()
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = GcrError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|(_, n)| *n == s)
            .map(|(k, _)| *k)
            .ok_or_else(|| GcrError::Config(format!("unknown op kind `{s}`")))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Scale(Var, f64),
    Shift(Var, f64),
    Relu(Var),
    Square(Var),
    Sum(Var),
    SoftmaxRows(Var),
    CrossEntropy(Var, Vec<usize>),
    Reshape(Var, Vec<usize>),
    Conv2d(Var, Var, Padding),
    MaxPool2d(Var, usize),
    Pairwise(Var, SimilarityKernel),
    StrictUpper(Var),
    Arccos(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::AddChannelBias(..) => OpKind::AddChannelBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Shift(..) => OpKind::Shift,
            Op::Relu(..) => OpKind::Relu,
            Op::Square(..) => OpKind::Square,
            Op::Sum(..) => OpKind::Sum,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::CrossEntropy(..) => OpKind::CrossEntropy,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Conv2d(..) => OpKind::Conv2d,
            Op::MaxPool2d(..) => OpKind::MaxPool2d,
            Op::Pairwise(..) => OpKind::Pairwise,
            Op::StrictUpper(..) => OpKind::StrictUpper,
            Op::Arccos(..) => OpKind::Arccos,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b)
            | Op::AddChannelBias(a, b)
            | Op::Conv2d(a, b, _) => vec![a, b],
            Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::SoftmaxRows(a)
            | Op::CrossEntropy(a, _)
            | Op::Reshape(a, _)
            | Op::MaxPool2d(a, _)
            | Op::Pairwise(a, _)
            | Op::StrictUpper(a)
            | Op::Arccos(a) => vec![a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one [`Tape::backward`] sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// participate in differentiation of that loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros of the given shape for
    /// non-participating nodes.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// The computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales every local gradient produced by `kind` by 1.5. Used by tests
    /// and the gradient checker's negative control.
    #[doc(hidden)]
    pub fn corrupt_rule(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// `[n×m] + [m]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRowBias(x, bias))
    }

    /// `[n×c×h×w] + [c]`, broadcasting one bias per channel.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddChannelBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(x, factor))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, offset: f64) -> Result<Var> {
        self.push(Op::Shift(x, offset))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Square(x))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax of an `n×C` matrix, max-shifted for stability.
    pub fn softmax_rows(&mut self, z: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(z))
    }

    /// Batch-mean cross-entropy of `n×C` logits against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy(logits, labels.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(x, shape.to_vec()))
    }

    /// Collapses every axis after the first (channel-height-width order).
    pub fn flatten_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = [t.rows(), t.row_len()];
        if t.shape() == shape {
            return Ok(x);
        }
        self.reshape(x, &shape)
    }

    /// Stride-1 cross-correlation of `n×c×h×w` input with `o×c×kh×kw` kernels.
    pub fn conv2d(&mut self, x: Var, kernel: Var, padding: Padding) -> Result<Var> {
        self.push(Op::Conv2d(x, kernel, padding))
    }

    /// Non-overlapping `size×size` max pooling (stride = size, floor).
    pub fn maxpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        self.push(Op::MaxPool2d(x, size))
    }

    /// `n×n` kernel similarity matrix of the rows of an `n×d` matrix.
    pub fn pairwise_similarity(&mut self, x: Var, kernel: SimilarityKernel) -> Result<Var> {
        self.push(Op::Pairwise(x, kernel))
    }

    /// Entries `i < j` of an `n×n` matrix in row-major pair order.
    pub fn strict_upper(&mut self, a: Var) -> Result<Var> {
        self.push(Op::StrictUpper(a))
    }

    /// `arccos` of inputs clamped to `[-1, 1]`; zero gradient at the clamp.
    pub fn arccos(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Arccos(x))
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf | Op::Constant => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(dim_err("matmul", a.shape(), b.shape()));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.shape() != b.shape() {
                    return Err(dim_err("elementwise", a.shape(), b.shape()));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            Op::AddRowBias(x, b) => {
                let (x, b) = (val(x), val(b));
                if x.ndim() != 2 || b.ndim() != 1 || x.shape()[1] != b.len() {
                    return Err(dim_err("add_row_bias", x.shape(), b.shape()));
                }
                let m = b.len();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v + b.data()[i % m])
                    .collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            Op::AddChannelBias(x, b) => {
                let (x, b) = (val(x), val(b));
                if x.ndim() != 4 || b.ndim() != 1 || x.shape()[1] != b.len() {
                    return Err(dim_err("add_channel_bias", x.shape(), b.shape()));
                }
                let c = b.len();
                let hw = x.shape()[2] * x.shape()[3];
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v + b.data()[(i / hw) % c])
                    .collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            Op::Scale(x, c) => Ok(val(x).map(|v| v * c)),
            Op::Shift(x, c) => Ok(val(x).map(|v| v + c)),
            Op::Relu(x) => Ok(val(x).map(|v| if v > 0.0 { v } else { 0.0 })),
            Op::Square(x) => Ok(val(x).map(|v| v * v)),
            Op::Sum(x) => Ok(Tensor::scalar(val(x).sum())),
            Op::SoftmaxRows(z) => {
                let z = val(z);
                if z.ndim() != 2 {
                    return Err(dim_err("softmax_rows", z.shape(), &[]));
                }
                softmax_rows_raw(z)
            }
            Op::CrossEntropy(z, labels) => {
                let z = val(z);
                if z.ndim() != 2 || z.shape()[0] != labels.len() {
                    return Err(dim_err("cross_entropy", z.shape(), &[labels.len()]));
                }
                let c = z.shape()[1];
                if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
                    return Err(GcrError::Contract(format!(
                        "label {bad} out of range for {c} classes"
                    )));
                }
                if !z.all_finite() {
                    return Err(GcrError::Numeric("non-finite logits".into()));
                }
                let n = labels.len();
                let mut total = 0.0;
                for (i, &y) in labels.iter().enumerate() {
                    let row = z.row(i);
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                    total += lse - row[y];
                }
                Ok(Tensor::scalar(total / n as f64))
            }
            Op::Reshape(x, shape) => {
                let x = val(x);
                x.reshape(shape).map_err(|_| dim_err("reshape", x.shape(), shape))
            }
            Op::Conv2d(x, k, padding) => conv2d_forward(val(x), val(k), *padding),
            Op::MaxPool2d(x, size) => maxpool_forward(val(x), *size).map(|(t, _)| t),
            Op::Pairwise(x, kernel) => {
                let x = val(x);
                if x.ndim() != 2 {
                    return Err(dim_err("pairwise_similarity", x.shape(), &[]));
                }
                let n = x.shape()[0];
                Tensor::new(vec![n, n], pairwise_forward(x, kernel)?)
            }
            Op::StrictUpper(a) => {
                let a = val(a);
                if a.ndim() != 2 || a.shape()[0] != a.shape()[1] {
                    return Err(dim_err("strict_upper", a.shape(), &[]));
                }
                let n = a.shape()[0];
                if n < 2 {
                    return Err(GcrError::DegenerateBatch(n));
                }
                let mut out = Vec::with_capacity(n * (n - 1) / 2);
                for i in 0..n {
                    out.extend_from_slice(&a.data()[i * n + i + 1..(i + 1) * n]);
                }
                Ok(Tensor::vector(out))
            }
            Op::Arccos(x) => Ok(val(x).map(|v| v.clamp(-1.0, 1.0).acos())),
        }
    }

    /// Recomputes every derived node from its inputs and reports whether the
    /// stored values are reproduced bit for bit.
    pub fn replay(&self) -> Result<bool> {
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let again = self.eval(&node.op)?;
            let same = again.shape() == node.value.shape()
                && again
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(GcrError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !matches!(node.op, Op::Leaf | Op::Constant) {
                let mut contribs = self.local_grads(node, &g);
                if self.fault == Some(node.op.kind()) {
                    for (_, t) in &mut contribs {
                        t.data_mut().iter_mut().for_each(|v| *v *= 1.5);
                    }
                }
                for (input, contrib) in contribs {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(contrib.data())
                            .for_each(|(a, c)| *a += c),
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let want = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut out = Vec::new();
                if want(a) {
                    let bt = transpose(bv.data(), k, n);
                    let da = matmul_raw(g.data(), &bt, m, n, k);
                    out.push((*a, Tensor::new(vec![m, k], da).unwrap()));
                }
                if want(b) {
                    let at = transpose(av.data(), m, k);
                    let db = matmul_raw(&at, g.data(), k, m, n);
                    out.push((*b, Tensor::new(vec![k, n], db).unwrap()));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                vec![(*a, zip_map(g, bv, |g, y| g * y)), (*b, zip_map(g, av, |g, x| g * x))]
            }
            Op::AddRowBias(x, b) => {
                let m = val(b).len();
                let mut db = vec![0.0; m];
                for (i, &v) in g.data().iter().enumerate() {
                    db[i % m] += v;
                }
                vec![(*x, g.clone()), (*b, Tensor::vector(db))]
            }
            Op::AddChannelBias(x, b) => {
                let s = val(x).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut db = vec![0.0; c];
                for (i, &v) in g.data().iter().enumerate() {
                    db[(i / hw) % c] += v;
                }
                vec![(*x, g.clone()), (*b, Tensor::vector(db))]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::Shift(x, _) => vec![(*x, g.clone())],
            Op::Relu(x) => vec![(*x, zip_map(g, val(x), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Square(x) => vec![(*x, zip_map(g, val(x), |g, x| 2.0 * x * g))],
            Op::Sum(x) => vec![(*x, Tensor::filled(val(x).shape(), g.item()))],
            Op::SoftmaxRows(z) => {
                let s = &node.value;
                let c = s.shape()[1];
                let mut dz = vec![0.0; s.len()];
                for i in 0..s.shape()[0] {
                    let (srow, grow) = (s.row(i), g.row(i));
                    let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dz[i * c + j] = srow[j] * (grow[j] - dot);
                    }
                }
                vec![(*z, Tensor::new(s.shape().to_vec(), dz).unwrap())]
            }
            Op::CrossEntropy(z, labels) => {
                let zv = val(z);
                let mut p = softmax_rows_raw(zv).expect("validated in forward");
                let c = zv.shape()[1];
                let scale = g.item() / labels.len() as f64;
                let data = p.data_mut();
                for (i, &y) in labels.iter().enumerate() {
                    data[i * c + y] -= 1.0;
                }
                data.iter_mut().for_each(|v| *v *= scale);
                vec![(*z, p)]
            }
            Op::Reshape(x, _) => vec![(*x, g.reshape(val(x).shape()).unwrap())],
            Op::Conv2d(x, k, padding) => {
                let (dx, dk) = conv2d_backward(val(x), val(k), *padding, g);
                vec![(*x, dx), (*k, dk)]
            }
            Op::MaxPool2d(x, size) => {
                let xv = val(x);
                let (_, arg) = maxpool_forward(xv, *size).expect("validated in forward");
                let mut dx = Tensor::zeros(xv.shape());
                for (o, &src) in arg.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[o];
                }
                vec![(*x, dx)]
            }
            Op::Pairwise(x, kernel) => {
                let xv = val(x);
                let dx = pairwise_backward(xv, kernel, &node.value, g);
                vec![(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap())]
            }
            Op::StrictUpper(a) => {
                let n = val(a).shape()[0];
                let mut da = Tensor::zeros(&[n, n]);
                let mut p = 0;
                for i in 0..n {
                    for j in i + 1..n {
                        da.data_mut()[i * n + j] = g.data()[p];
                        p += 1;
                    }
                }
                vec![(*a, da)]
            }
            Op::Arccos(x) => vec![(
                *x,
                zip_map(g, val(x), |g, x| {
                    if x > -1.0 && x < 1.0 {
                        -g / (1.0 - x * x).sqrt()
                    } else {
                        0.0
                    }
                }),
            )],
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows_raw(z: &Tensor) -> Result<Tensor> {
    if !z.all_finite() {
        return Err(GcrError::Numeric("non-finite input to softmax".into()));
    }
    let c = z.row_len();
    let mut out = Vec::with_capacity(z.len());
    for i in 0..z.rows() {
        let row = z.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - mx).exp()));
        let s: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= s);
    }
    debug_assert_eq!(out.len(), z.rows() * c);
    Tensor::new(z.shape().to_vec(), out)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    top: usize,
    left: usize,
}

fn conv_geom(x: &Tensor, k: &Tensor, padding: Padding) -> Result<ConvGeom> {
    let (xs, ks) = (x.shape(), k.shape());
    if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
        return Err(dim_err("conv2d", xs, ks));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ks[0], ks[2], ks[3]);
    let (oh, ow, top, left) = match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(dim_err("conv2d", xs, ks));
            }
            (h - kh + 1, w - kw + 1, 0, 0)
        }
        Padding::Same => (h, w, (kh - 1) / 2, (kw - 1) / 2),
    };
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh,
        ow,
        top,
        left,
    })
}

fn conv2d_forward(x: &Tensor, k: &Tensor, padding: Padding) -> Result<Tensor> {
    let gm = conv_geom(x, k, padding)?;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; gm.n * gm.o * gm.oh * gm.ow];
    for b in 0..gm.n {
        for oc in 0..gm.o {
            let obase = (b * gm.o + oc) * gm.oh * gm.ow;
            for ic in 0..gm.c {
                let xbase = (b * gm.c + ic) * gm.h * gm.w;
                let kbase = (oc * gm.c + ic) * gm.kh * gm.kw;
                for i in 0..gm.kh {
                    for j in 0..gm.kw {
                        let kv = kd[kbase + i * gm.kw + j];
                        for y in 0..gm.oh {
                            let sy = (y + i) as isize - gm.top as isize;
                            if sy < 0 || sy >= gm.h as isize {
                                continue;
                            }
                            let xrow = xbase + sy as usize * gm.w;
                            let orow = obase + y * gm.ow;
                            for xx in 0..gm.ow {
                                let sx = (xx + j) as isize - gm.left as isize;
                                if sx < 0 || sx >= gm.w as isize {
                                    continue;
                                }
                                out[orow + xx] += kv * xd[xrow + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![gm.n, gm.o, gm.oh, gm.ow], out)
}

fn conv2d_backward(x: &Tensor, k: &Tensor, padding: Padding, g: &Tensor) -> (Tensor, Tensor) {
    let gm = conv_geom(x, k, padding).expect("validated in forward");
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    for b in 0..gm.n {
        for oc in 0..gm.o {
            let obase = (b * gm.o + oc) * gm.oh * gm.ow;
            for ic in 0..gm.c {
                let xbase = (b * gm.c + ic) * gm.h * gm.w;
                let kbase = (oc * gm.c + ic) * gm.kh * gm.kw;
                for i in 0..gm.kh {
                    for j in 0..gm.kw {
                        let kv = kd[kbase + i * gm.kw + j];
                        let mut acc = 0.0;
                        for y in 0..gm.oh {
                            let sy = (y + i) as isize - gm.top as isize;
                            if sy < 0 || sy >= gm.h as isize {
                                continue;
                            }
                            let xrow = xbase + sy as usize * gm.w;
                            let orow = obase + y * gm.ow;
                            for xx in 0..gm.ow {
                                let sx = (xx + j) as isize - gm.left as isize;
                                if sx < 0 || sx >= gm.w as isize {
                                    continue;
                                }
                                let gv = gd[orow + xx];
                                acc += gv * xd[xrow + sx as usize];
                                dx[xrow + sx as usize] += gv * kv;
                            }
                        }
                        dk[kbase + i * gm.kw + j] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(k.shape().to_vec(), dk).unwrap(),
    )
}

/// Returns pooled values and, per output element, the flat index of the
/// first maximal input in scan order.
fn maxpool_forward(x: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
        return Err(dim_err("maxpool2d", s, &[size, size]));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + y * size * w + xx * size;
                for i in 0..size {
                    for j in 0..size {
                        let idx = base + (y * size + i) * w + xx * size + j;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x.data()[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}
