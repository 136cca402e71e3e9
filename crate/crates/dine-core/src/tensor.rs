//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] is a define-by-run computation record: every operation appends
//! a node holding the result and the operation that produced it, so node
//! indices are already in topological order. [`Tape::backward`] walks the
//! record once in reverse, accumulating adjoints into every tensor that
//! requires gradients.

use crate::error::{Error, Result};
use crate::kernels;

/// Handle to a tensor stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Dense row-major 64-bit float tensor.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// Matrix [r,c] plus a length-c bias vector added to every row.
    AddBias(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    PowConst(NodeId, f64),
    ClampMax(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    /// [r,c] -> [r*k,c] with each row repeated k times consecutively.
    RepeatRows(NodeId, usize),
    /// Cyclic row shift downward by `shift`.
    RollRows(NodeId, usize),
    MeanRows(NodeId),
    LogMeanExpRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    LogMeanExp(NodeId),
    Reshape(NodeId),
}

/// Ordered record of primitive operations; topological by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

fn matrix_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::ShapeMismatch {
            op,
            left: other.to_vec(),
            right: vec![0, 0],
        }),
    }
}

/// log((1/n) sum exp(x_i)) with max-subtraction; returns the max used.
fn log_mean_exp_slice(x: &[f64]) -> (f64, f64) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return (m, m);
    }
    let s: f64 = x.iter().map(|&v| (v - m).exp()).sum();
    (m + (s / x.len() as f64).ln(), m)
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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].numel(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        });
        self.ops.push(op);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Insert a constant leaf (no gradient).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> NodeId {
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(vec![value], vec![])
    }

    /// Insert a leaf that participates in gradient accumulation.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> NodeId {
        self.push(shape, data, true, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> NodeId {
        let n = shape.iter().product();
        self.constant(vec![0.0; n], shape)
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (na, nb) = (sa.numel(), sb.numel());
        let data: Vec<f64> = if sa.shape == sb.shape {
            sa.data.iter().zip(&sb.data).map(|(&x, &y)| f(x, y)).collect()
        } else if nb == 1 {
            let y = sb.data[0];
            sa.data.iter().map(|&x| f(x, y)).collect()
        } else if na == 1 {
            let x = sa.data[0];
            sb.data.iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: sa.shape.clone(),
                right: sb.shape.clone(),
            });
        };
        let shape = if na >= nb {
            sa.shape.clone()
        } else {
            sb.shape.clone()
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(shape, data, rg, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = matrix_dims(&self.nodes[a.0].shape, "matmul")?;
        let (kb, n) = matrix_dims(&self.nodes[b.0].shape, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let data = kernels::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], data, rg, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = matrix_dims(&self.nodes[a.0].shape, "add_bias")?;
        if self.nodes[bias.0].shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&self.nodes[bias.0].data) {
                *v += b;
            }
        }
        let rg = self.needs(&[a, bias]);
        Ok(self.push(vec![r, c], data, rg, Op::AddBias(a, bias)))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, data, rg, op)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::AddConst(a, c))
    }

    pub fn pow_const(&mut self, a: NodeId, p: f64) -> NodeId {
        self.unary(a, |x| x.powf(p), Op::PowConst(a, p))
    }

    pub fn clamp_max(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x.min(c), Op::ClampMax(a, c))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols"));
        }
        let (r0, _) = matrix_dims(&self.nodes[parts[0].0].shape, "concat_cols")?;
        let mut cols = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims(&self.nodes[p.0].shape, "concat_cols")?;
            if r != r0 {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[parts[0].0].shape.clone(),
                    right: self.nodes[p.0].shape.clone(),
                });
            }
            cols.push(c);
        }
        let total: usize = cols.iter().sum();
        let mut data = vec![0.0; r0 * total];
        let mut offset = 0;
        for (&p, &c) in parts.iter().zip(&cols) {
            let src = &self.nodes[p.0].data;
            for row in 0..r0 {
                data[row * total + offset..row * total + offset + c]
                    .copy_from_slice(&src[row * c..(row + 1) * c]);
            }
            offset += c;
        }
        let rg = self.needs(parts);
        Ok(self.push(vec![r0, total], data, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows"));
        }
        let (_, c0) = matrix_dims(&self.nodes[parts[0].0].shape, "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = matrix_dims(&self.nodes[p.0].shape, "concat_rows")?;
            if c != c0 {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.nodes[parts[0].0].shape.clone(),
                    right: self.nodes[p.0].shape.clone(),
                });
            }
            data.extend_from_slice(&self.nodes[p.0].data);
            rows += r;
        }
        let rg = self.needs(parts);
        Ok(self.push(vec![rows, c0], data, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn repeat_rows(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let (r, c) = matrix_dims(&self.nodes[a.0].shape, "repeat_rows")?;
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(r * k * c);
        for row in 0..r {
            for _ in 0..k {
                data.extend_from_slice(&src[row * c..(row + 1) * c]);
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![r * k, c], data, rg, Op::RepeatRows(a, k)))
    }

    pub fn roll_rows(&mut self, a: NodeId, shift: usize) -> Result<NodeId> {
        let (r, c) = matrix_dims(&self.nodes[a.0].shape, "roll_rows")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for row in 0..r {
            let dst = (row + shift) % r;
            data[dst * c..(dst + 1) * c].copy_from_slice(&src[row * c..(row + 1) * c]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![r, c], data, rg, Op::RollRows(a, shift)))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = matrix_dims(&self.nodes[a.0].shape, "mean_rows")?;
        if c == 0 {
            return Err(Error::EmptyInput("mean_rows"));
        }
        let src = &self.nodes[a.0].data;
        let data: Vec<f64> = (0..r)
            .map(|row| src[row * c..(row + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![r], data, rg, Op::MeanRows(a)))
    }

    pub fn log_mean_exp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = matrix_dims(&self.nodes[a.0].shape, "log_mean_exp_rows")?;
        if c == 0 {
            return Err(Error::EmptyInput("log_mean_exp_rows"));
        }
        let src = &self.nodes[a.0].data;
        let data: Vec<f64> = (0..r)
            .map(|row| log_mean_exp_slice(&src[row * c..(row + 1) * c]).0)
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![r], data, rg, Op::LogMeanExpRows(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].numel();
        if n == 0 {
            return Err(Error::EmptyInput("mean"));
        }
        let s: f64 = self.nodes[a.0].data.iter().sum::<f64>() / n as f64;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![], vec![s], rg, Op::Mean(a)))
    }

    /// log((1/n) sum_i exp(x_i)) over all entries, computed with
    /// max-subtraction so large potentials cannot overflow.
    pub fn log_mean_exp(&mut self, a: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].numel() == 0 {
            return Err(Error::EmptyInput("log_mean_exp"));
        }
        let v = log_mean_exp_slice(&self.nodes[a.0].data).0;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![], vec![v], rg, Op::LogMeanExp(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.nodes[a.0].shape.clone(),
                right: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::Reshape(a)))
    }

    /// Recompute every non-leaf node from the recorded operations.
    /// With unchanged leaves the result is bit-identical to the original
    /// forward pass.
    pub fn replay(&mut self) {
        for idx in 0..self.nodes.len() {
            let op = self.ops[idx].clone();
            let data: Vec<f64> = match op {
                Op::Leaf => continue,
                Op::Add(a, b) => self.replay_binary(a, b, |x, y| x + y),
                Op::Sub(a, b) => self.replay_binary(a, b, |x, y| x - y),
                Op::Mul(a, b) => self.replay_binary(a, b, |x, y| x * y),
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    kernels::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n)
                }
                Op::AddBias(a, bias) => {
                    let c = self.nodes[a.0].shape[1];
                    let mut d = self.nodes[a.0].data.clone();
                    for row in d.chunks_mut(c) {
                        for (v, b) in row.iter_mut().zip(&self.nodes[bias.0].data) {
                            *v += b;
                        }
                    }
                    d
                }
                Op::Sigmoid(a) => self.nodes[a.0].data.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
                Op::Tanh(a) => self.nodes[a.0].data.iter().map(|&x| x.tanh()).collect(),
                Op::Relu(a) => self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect(),
                Op::Exp(a) => self.nodes[a.0].data.iter().map(|&x| x.exp()).collect(),
                Op::Log(a) => self.nodes[a.0].data.iter().map(|&x| x.ln()).collect(),
                Op::Neg(a) => self.nodes[a.0].data.iter().map(|&x| -x).collect(),
                Op::Scale(a, c) => self.nodes[a.0].data.iter().map(|&x| c * x).collect(),
                Op::AddConst(a, c) => self.nodes[a.0].data.iter().map(|&x| x + c).collect(),
                Op::PowConst(a, p) => self.nodes[a.0].data.iter().map(|&x| x.powf(p)).collect(),
                Op::ClampMax(a, c) => self.nodes[a.0].data.iter().map(|&x| x.min(c)).collect(),
                Op::ConcatCols(ref parts) => {
                    let total = self.nodes[idx].shape[1];
                    let r = self.nodes[idx].shape[0];
                    let mut d = vec![0.0; r * total];
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.nodes[p.0].shape[1];
                        for row in 0..r {
                            d[row * total + offset..row * total + offset + c].copy_from_slice(
                                &self.nodes[p.0].data[row * c..(row + 1) * c],
                            );
                        }
                        offset += c;
                    }
                    d
                }
                Op::ConcatRows(ref parts) => {
                    let mut d = Vec::new();
                    for &p in parts {
                        d.extend_from_slice(&self.nodes[p.0].data);
                    }
                    d
                }
                Op::RepeatRows(a, k) => {
                    let c = self.nodes[a.0].shape[1];
                    let r = self.nodes[a.0].shape[0];
                    let mut d = Vec::with_capacity(r * k * c);
                    for row in 0..r {
                        for _ in 0..k {
                            d.extend_from_slice(&self.nodes[a.0].data[row * c..(row + 1) * c]);
                        }
                    }
                    d
                }
                Op::RollRows(a, shift) => {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut d = vec![0.0; r * c];
                    for row in 0..r {
                        let dst = (row + shift) % r;
                        d[dst * c..(dst + 1) * c]
                            .copy_from_slice(&self.nodes[a.0].data[row * c..(row + 1) * c]);
                    }
                    d
                }
                Op::MeanRows(a) => {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    (0..r)
                        .map(|row| {
                            self.nodes[a.0].data[row * c..(row + 1) * c].iter().sum::<f64>()
                                / c as f64
                        })
                        .collect()
                }
                Op::LogMeanExpRows(a) => {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    (0..r)
                        .map(|row| {
                            log_mean_exp_slice(&self.nodes[a.0].data[row * c..(row + 1) * c]).0
                        })
                        .collect()
                }
                Op::Sum(a) => vec![self.nodes[a.0].data.iter().sum()],
                Op::Mean(a) => {
                    vec![self.nodes[a.0].data.iter().sum::<f64>() / self.nodes[a.0].numel() as f64]
                }
                Op::LogMeanExp(a) => vec![log_mean_exp_slice(&self.nodes[a.0].data).0],
                Op::Reshape(a) => self.nodes[a.0].data.clone(),
            };
            self.nodes[idx].data = data;
        }
    }

    fn replay_binary(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (sa, sb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if sa.shape == sb.shape {
            sa.data.iter().zip(&sb.data).map(|(&x, &y)| f(x, y)).collect()
        } else if sb.numel() == 1 {
            let y = sb.data[0];
            sa.data.iter().map(|&x| f(x, y)).collect()
        } else {
            let x = sa.data[0];
            sb.data.iter().map(|&y| f(x, y)).collect()
        }
    }

    /// Overwrite the data of a leaf node (used by replay-based tests).
    pub fn set_leaf(&mut self, id: NodeId, data: Vec<f64>) -> Result<()> {
        if !matches!(self.ops[id.0], Op::Leaf) {
            return Err(Error::Config("set_leaf on a non-leaf node".into()));
        }
        if data.len() != self.nodes[id.0].numel() {
            return Err(Error::ShapeMismatch {
                op: "set_leaf",
                left: self.nodes[id.0].shape.clone(),
                right: vec![data.len()],
            });
        }
        self.nodes[id.0].data = data;
        Ok(())
    }

    /// Reverse-mode sweep from a scalar loss. Adjoints are stored in the
    /// `grad` field of every tensor with `requires_grad`, visiting each node
    /// exactly once in reverse topological order.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let op = self.ops[idx].clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate_broadcast(&mut grads, a, &g, 1.0);
                    self.accumulate_broadcast(&mut grads, b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.accumulate_broadcast(&mut grads, a, &g, 1.0);
                    self.accumulate_broadcast(&mut grads, b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let ga = self.mul_grad_for(a, b, &g);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = self.mul_grad_for(b, a, &g);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    if self.nodes[a.0].requires_grad {
                        let ga = kernels::matmul_nt(&g, &self.nodes[b.0].data, m, n, k);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = kernels::matmul_tn(&self.nodes[a.0].data, &g, k, m, n);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.nodes[a.0].requires_grad {
                        self.accumulate(&mut grads, a, g.clone());
                    }
                    if self.nodes[bias.0].requires_grad {
                        let c = self.nodes[bias.0].numel();
                        let mut gb = vec![0.0; c];
                        for row in g.chunks(c) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accumulate(&mut grads, bias, gb);
                    }
                }
                Op::Sigmoid(a) => {
                    let ga: Vec<f64> = self.nodes[idx]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&s, &gv)| gv * s * (1.0 - s))
                        .collect();
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> = self.nodes[idx]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&t, &gv)| gv * (1.0 - t * t))
                        .collect();
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Relu(a) => {
                    let ga: Vec<f64> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Exp(a) => {
                    let ga: Vec<f64> = self.nodes[idx]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&e, &gv)| gv * e)
                        .collect();
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Log(a) => {
                    let ga: Vec<f64> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| gv / x)
                        .collect();
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Neg(a) => {
                    let ga: Vec<f64> = g.iter().map(|&gv| -gv).collect();
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|&gv| c * gv).collect();
                    self.accumulate(&mut grads, a, ga);
                }
                Op::AddConst(a, _) => {
                    self.accumulate(&mut grads, a, g.clone());
                }
                Op::PowConst(a, p) => {
                    let ga: Vec<f64> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| gv * p * x.powf(p - 1.0))
                        .collect();
                    self.accumulate(&mut grads, a, ga);
                }
                Op::ClampMax(a, c) => {
                    let ga: Vec<f64> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| if x <= c { gv } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, a, ga);
                }
                Op::ConcatCols(parts) => {
                    let total = self.nodes[idx].shape[1];
                    let r = self.nodes[idx].shape[0];
                    let mut offset = 0;
                    for &p in &parts {
                        let c = self.nodes[p.0].shape[1];
                        if self.nodes[p.0].requires_grad {
                            let mut gp = vec![0.0; r * c];
                            for row in 0..r {
                                gp[row * c..(row + 1) * c].copy_from_slice(
                                    &g[row * total + offset..row * total + offset + c],
                                );
                            }
                            self.accumulate(&mut grads, p, gp);
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in &parts {
                        let len = self.nodes[p.0].numel();
                        if self.nodes[p.0].requires_grad {
                            self.accumulate(&mut grads, p, g[offset..offset + len].to_vec());
                        }
                        offset += len;
                    }
                }
                Op::RepeatRows(a, k) => {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut ga = vec![0.0; r * c];
                    for row in 0..r {
                        for rep in 0..k {
                            let src = &g[(row * k + rep) * c..(row * k + rep + 1) * c];
                            for (acc, v) in ga[row * c..(row + 1) * c].iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                    }
                    self.accumulate(&mut grads, a, ga);
                }
                Op::RollRows(a, shift) => {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut ga = vec![0.0; r * c];
                    for row in 0..r {
                        let dst = (row + shift) % r;
                        ga[row * c..(row + 1) * c].copy_from_slice(&g[dst * c..(dst + 1) * c]);
                    }
                    self.accumulate(&mut grads, a, ga);
                }
                Op::MeanRows(a) => {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut ga = vec![0.0; r * c];
                    for row in 0..r {
                        let gv = g[row] / c as f64;
                        for v in ga[row * c..(row + 1) * c].iter_mut() {
                            *v = gv;
                        }
                    }
                    self.accumulate(&mut grads, a, ga);
                }
                Op::LogMeanExpRows(a) => {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut ga = vec![0.0; r * c];
                    for row in 0..r {
                        let x = &self.nodes[a.0].data[row * c..(row + 1) * c];
                        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = x.iter().map(|&v| (v - m).exp()).sum();
                        for (out, &v) in ga[row * c..(row + 1) * c].iter_mut().zip(x) {
                            *out = g[row] * (v - m).exp() / denom;
                        }
                    }
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Sum(a) => {
                    let ga = vec![g[0]; self.nodes[a.0].numel()];
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].numel();
                    let ga = vec![g[0] / n as f64; n];
                    self.accumulate(&mut grads, a, ga);
                }
                Op::LogMeanExp(a) => {
                    let x = &self.nodes[a.0].data;
                    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = x.iter().map(|&v| (v - m).exp()).sum();
                    let ga: Vec<f64> = x.iter().map(|&v| g[0] * (v - m).exp() / denom).collect();
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Reshape(a) => {
                    self.accumulate(&mut grads, a, g.clone());
                }
            }
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn mul_grad_for(&self, target: NodeId, other: NodeId, g: &[f64]) -> Vec<f64> {
        let t = &self.nodes[target.0];
        let o = &self.nodes[other.0];
        if t.shape == o.shape {
            g.iter().zip(&o.data).map(|(&gv, &ov)| gv * ov).collect()
        } else if o.numel() == 1 {
            let ov = o.data[0];
            g.iter().map(|&gv| gv * ov).collect()
        } else {
            // target is the scalar side: reduce
            vec![g.iter().zip(&o.data).map(|(&gv, &ov)| gv * ov).sum()]
        }
    }

    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: NodeId,
        g: &[f64],
        sign: f64,
    ) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let n = self.nodes[target.0].numel();
        let contribution: Vec<f64> = if n == g.len() {
            g.iter().map(|&v| sign * v).collect()
        } else {
            // broadcast scalar: reduce upstream gradient
            vec![sign * g.iter().sum::<f64>()]
        };
        self.accumulate(grads, target, contribution);
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: NodeId, contribution: Vec<f64>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(&contribution) {
                    *a += v;
                }
            }
            slot => *slot = Some(contribution),
        }
    }
}
