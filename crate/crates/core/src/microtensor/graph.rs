//! Eager tape. Every op evaluates immediately and records enough to run the
//! reverse pass; the tape is rebuilt from scratch for each training step.

use std::collections::HashMap;

use super::kernels;
use super::tensor::{Result, Tensor, TensorError};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive catalog. Parameterised kinds carry their static arguments.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Gelu,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Gather(Vec<usize>),
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
    Square,
    Log,
    Exp,
    Cosine,
    Normalize,
    Concat,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Reshape(_) => "reshape",
            OpKind::Permute(_) => "permute",
            OpKind::Gather(_) => "gather",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis(_) => "sum_axis",
            OpKind::MeanAxis(_) => "mean_axis",
            OpKind::Square => "square",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Cosine => "cosine",
            OpKind::Normalize => "normalize",
            OpKind::Concat => "concat",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Cosine | OpKind::Concat => 2,
            _ => 1,
        }
    }
}

/// Values cached by the forward pass for use in the reverse pass.
#[derive(Debug, Clone)]
enum Saved {
    None,
    /// Per-row inverse standard deviation.
    InvStd(Vec<f64>),
    /// Per-row L2 norms (one or two operands).
    Norms(Vec<f64>, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    kind: Option<OpKind>,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
    saved: Saved,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf of a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_leaf: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, leaf: NodeId) -> Option<&Tensor> {
        self.by_leaf.get(&leaf)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
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

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, mut value: Tensor, requires_grad: bool) -> NodeId {
        value.clear_grad();
        self.nodes.push(Node { kind: None, inputs: vec![], value, requires_grad, saved: Saved::None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id.0].kind.is_none()
    }

    fn check(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes.get(id.0).map(|n| &n.value).ok_or(TensorError::GraphNotEvaluated(id.0))
    }

    /// Evaluates one primitive on existing nodes and records it on the tape.
    pub fn eval(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != kind.arity() {
            return Err(TensorError::ShapeMismatch {
                op: kind.name(),
                detail: format!("expected {} inputs, got {}", kind.arity(), inputs.len()),
            });
        }
        for &id in inputs {
            self.check(id)?;
        }
        let a = &self.nodes[inputs[0].0].value;
        let b = inputs.get(1).map(|id| &self.nodes[id.0].value);
        let (value, saved) = forward(&kind, a, b)?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: kind.name() });
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node { kind: Some(kind), inputs: inputs.to_vec(), value, requires_grad, saved });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.eval(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.eval(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.eval(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.eval(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.eval(OpKind::Scale(factor), &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.eval(OpKind::Relu, &[a])
    }
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.eval(OpKind::Gelu, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.eval(OpKind::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.eval(OpKind::LogSoftmax, &[a])
    }
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.eval(OpKind::LayerNorm, &[a])
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.eval(OpKind::Reshape(shape.to_vec()), &[a])
    }
    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.eval(OpKind::Permute(axes.to_vec()), &[a])
    }
    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let rank = self.check(a)?.rank();
        if rank < 2 {
            return Err(TensorError::ShapeMismatch { op: "transpose", detail: "rank < 2".into() });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }
    /// Selects rows along axis 0.
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.eval(OpKind::Gather(indices.to_vec()), &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.eval(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.eval(OpKind::Mean, &[a])
    }
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.eval(OpKind::SumAxis(axis), &[a])
    }
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.eval(OpKind::MeanAxis(axis), &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.eval(OpKind::Square, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.eval(OpKind::Log, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.eval(OpKind::Exp, &[a])
    }
    /// Cosine similarity of matching rows along the last axis.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.eval(OpKind::Cosine, &[a, b])
    }
    /// L2-normalizes every row along the last axis.
    pub fn normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.eval(OpKind::Normalize, &[a])
    }
    /// Concatenates along the last axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.eval(OpKind::Concat, &[a, b])
    }

    /// `x · w + b` over the last axis of `x`, for any leading shape.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let shape = self.check(x)?.shape().to_vec();
        let in_dim = *shape.last().unwrap();
        let rows = shape.iter().product::<usize>() / in_dim;
        let flat = if shape.len() == 2 { x } else { self.reshape(x, &[rows, in_dim])? };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let out_dim = self.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_dim;
        self.reshape(y, &out_shape)
    }

    /// Reverse-mode accumulation from a scalar `loss`. Every leaf gets an
    /// entry; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.check(loss)?;
        if loss_value.numel() != 1 {
            return Err(TensorError::NotScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(kind) = &node.kind else { continue };
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, kind, &g, &mut grads);
        }
        let mut by_leaf = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.kind.is_some() {
                continue;
            }
            let g = grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| vec![0.0; node.value.numel()]);
            let t = Tensor::new(node.value.shape().to_vec(), g)?;
            by_leaf.insert(NodeId(i), t);
        }
        Ok(Gradients { by_leaf })
    }

    /// Copies leaf gradients into the leaf tensors' grad buffers.
    pub fn attach_grads(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in &grads.by_leaf {
            self.nodes[id.0].value.set_grad(g.data().to_vec())?;
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, kind: &OpKind, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let ins = &node.inputs;
        let want = |k: usize| self.nodes[ins[k].0].requires_grad;
        let val = |k: usize| &self.nodes[ins[k].0].value;
        let out = &node.value;
        macro_rules! acc {
            ($k:expr) => {{
                let id = ins[$k].0;
                let n = self.nodes[id].value.numel();
                grads[id].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        match kind {
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let dims = kernels::matmul_dims(a.shape(), b.shape()).expect("validated in forward");
                if want(0) {
                    let ga = acc!(0);
                    kernels::matmul_grad_a(g, b.data(), ga, &dims);
                }
                if want(1) {
                    let gb = acc!(1);
                    kernels::matmul_grad_b(a.data(), g, gb, &dims);
                }
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let m = val(1).numel();
                if want(0) {
                    let ga = acc!(0);
                    match kind {
                        OpKind::Mul => {
                            let b = val(1).data();
                            for (i, gi) in g.iter().enumerate() {
                                ga[i] += gi * b[i % m];
                            }
                        }
                        _ => {
                            for (i, gi) in g.iter().enumerate() {
                                ga[i] += gi;
                            }
                        }
                    }
                }
                if want(1) {
                    let gb = acc!(1);
                    match kind {
                        OpKind::Add => {
                            for (i, gi) in g.iter().enumerate() {
                                gb[i % m] += gi;
                            }
                        }
                        OpKind::Sub => {
                            for (i, gi) in g.iter().enumerate() {
                                gb[i % m] -= gi;
                            }
                        }
                        _ => {
                            let a = val(0).data();
                            for (i, gi) in g.iter().enumerate() {
                                gb[i % m] += gi * a[i];
                            }
                        }
                    }
                }
            }
            OpKind::Scale(f) => {
                let ga = acc!(0);
                for (i, gi) in g.iter().enumerate() {
                    ga[i] += gi * f;
                }
            }
            OpKind::Relu => {
                let a = val(0).data();
                let ga = acc!(0);
                for (i, gi) in g.iter().enumerate() {
                    if a[i] > 0.0 {
                        ga[i] += gi;
                    }
                }
            }
            OpKind::Gelu => {
                let a = val(0).data();
                let ga = acc!(0);
                for (i, gi) in g.iter().enumerate() {
                    ga[i] += gi * kernels::gelu_grad(a[i]);
                }
            }
            OpKind::Softmax => {
                let y = out.data();
                let d = *out.shape().last().unwrap();
                let ga = acc!(0);
                for r in 0..y.len() / d {
                    let row = r * d..(r + 1) * d;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        ga[j] += y[j] * (g[j] - dot);
                    }
                }
            }
            OpKind::LogSoftmax => {
                let y = out.data();
                let d = *out.shape().last().unwrap();
                let ga = acc!(0);
                for r in 0..y.len() / d {
                    let row = r * d..(r + 1) * d;
                    let total: f64 = g[row.clone()].iter().sum();
                    for j in row {
                        ga[j] += g[j] - y[j].exp() * total;
                    }
                }
            }
            OpKind::LayerNorm => {
                let Saved::InvStd(inv) = &node.saved else { unreachable!() };
                let y = out.data();
                let d = *out.shape().last().unwrap();
                let n = d as f64;
                let ga = acc!(0);
                for (r, &s) in inv.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let sum_g: f64 = g[row.clone()].iter().sum();
                    let sum_gy: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        ga[j] += s / n * (n * g[j] - sum_g - y[j] * sum_gy);
                    }
                }
            }
            OpKind::Reshape(_) => {
                let ga = acc!(0);
                for (i, gi) in g.iter().enumerate() {
                    ga[i] += gi;
                }
            }
            OpKind::Permute(axes) => {
                let in_shape = val(0).shape();
                let ga = acc!(0);
                kernels::permute_accumulate_back(g, in_shape, axes, ga);
            }
            OpKind::Gather(indices) => {
                let a = val(0);
                let width = a.numel() / a.shape()[0];
                let ga = acc!(0);
                for (r, &src) in indices.iter().enumerate() {
                    let dst = &mut ga[src * width..(src + 1) * width];
                    for (d, gi) in dst.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                        *d += gi;
                    }
                }
            }
            OpKind::Sum | OpKind::Mean => {
                let n = val(0).numel();
                let coef = if matches!(kind, OpKind::Mean) { g[0] / n as f64 } else { g[0] };
                let ga = acc!(0);
                for v in ga.iter_mut() {
                    *v += coef;
                }
            }
            OpKind::SumAxis(axis) | OpKind::MeanAxis(axis) => {
                let (outer, len, inner) = kernels::axis_split(val(0).shape(), *axis);
                let coef = if matches!(kind, OpKind::MeanAxis(_)) { 1.0 / len as f64 } else { 1.0 };
                let ga = acc!(0);
                for o in 0..outer {
                    for l in 0..len {
                        for k in 0..inner {
                            ga[(o * len + l) * inner + k] += coef * g[o * inner + k];
                        }
                    }
                }
            }
            OpKind::Square => {
                let a = val(0).data();
                let ga = acc!(0);
                for (i, gi) in g.iter().enumerate() {
                    ga[i] += 2.0 * a[i] * gi;
                }
            }
            OpKind::Log => {
                let a = val(0).data();
                let ga = acc!(0);
                for (i, gi) in g.iter().enumerate() {
                    ga[i] += gi / a[i];
                }
            }
            OpKind::Exp => {
                let y = out.data();
                let ga = acc!(0);
                for (i, gi) in g.iter().enumerate() {
                    ga[i] += gi * y[i];
                }
            }
            OpKind::Cosine => {
                let Saved::Norms(na, nb) = &node.saved else { unreachable!() };
                let a = val(0).data();
                let b = val(1).data();
                let c = out.data();
                let d = *val(0).shape().last().unwrap();
                if want(0) {
                    let ga = acc!(0);
                    for r in 0..c.len() {
                        for j in r * d..(r + 1) * d {
                            ga[j] += g[r] * (b[j] / (na[r] * nb[r]) - c[r] * a[j] / (na[r] * na[r]));
                        }
                    }
                }
                if want(1) {
                    let gb = acc!(1);
                    for r in 0..c.len() {
                        for j in r * d..(r + 1) * d {
                            gb[j] += g[r] * (a[j] / (na[r] * nb[r]) - c[r] * b[j] / (nb[r] * nb[r]));
                        }
                    }
                }
            }
            OpKind::Normalize => {
                let Saved::Norms(norms, _) = &node.saved else { unreachable!() };
                let y = out.data();
                let d = *out.shape().last().unwrap();
                let ga = acc!(0);
                for (r, &n) in norms.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        ga[j] += (g[j] - y[j] * dot) / n;
                    }
                }
            }
            OpKind::Concat => {
                let da = *val(0).shape().last().unwrap();
                let db = *val(1).shape().last().unwrap();
                let rows = val(0).numel() / da;
                if want(0) {
                    let ga = acc!(0);
                    for r in 0..rows {
                        for j in 0..da {
                            ga[r * da + j] += g[r * (da + db) + j];
                        }
                    }
                }
                if want(1) {
                    let gb = acc!(1);
                    for r in 0..rows {
                        for j in 0..db {
                            gb[r * db + j] += g[r * (da + db) + da + j];
                        }
                    }
                }
            }
        }
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    let nb: usize = b.iter().product();
    nb == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

/// Computes the forward value of one primitive.
fn forward(kind: &OpKind, a: &Tensor, b: Option<&Tensor>) -> Result<(Tensor, Saved)> {
    let op = kind.name();
    let plain = |t: Tensor| Ok((t, Saved::None));
    match kind {
        OpKind::MatMul => {
            let b = b.unwrap();
            let dims = kernels::matmul_dims(a.shape(), b.shape())
                .ok_or_else(|| mismatch(op, format!("{:?} x {:?}", a.shape(), b.shape())))?;
            let mut out = vec![0.0; dims.batch * dims.m * dims.n];
            kernels::matmul_forward(a.data(), b.data(), &mut out, &dims);
            plain(Tensor::new(dims.out_shape.clone(), out)?)
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let b = b.unwrap();
            if !broadcast_ok(a.shape(), b.shape()) {
                return Err(mismatch(op, format!("{:?} with {:?}", a.shape(), b.shape())));
            }
            let bd = b.data();
            let m = bd.len();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bd[i % m];
                    match kind {
                        OpKind::Add => x + y,
                        OpKind::Sub => x - y,
                        _ => x * y,
                    }
                })
                .collect();
            plain(Tensor::new(a.shape().to_vec(), data)?)
        }
        OpKind::Scale(f) => plain(a.map(|x| x * f)),
        OpKind::Relu => plain(a.map(|x| if x > 0.0 { x } else { 0.0 })),
        OpKind::Gelu => plain(a.map(kernels::gelu)),
        OpKind::Square => plain(a.map(|x| x * x)),
        OpKind::Log => plain(a.map(f64::ln)),
        OpKind::Exp => plain(a.map(f64::exp)),
        OpKind::Softmax | OpKind::LogSoftmax => {
            let d = *a.shape().last().unwrap();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(d) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
                if matches!(kind, OpKind::Softmax) {
                    for v in row.iter_mut() {
                        *v = (*v - max).exp() / total;
                    }
                } else {
                    let lse = total.ln();
                    for v in row.iter_mut() {
                        *v = *v - max - lse;
                    }
                }
            }
            plain(Tensor::new(a.shape().to_vec(), data)?)
        }
        OpKind::LayerNorm => {
            let d = *a.shape().last().unwrap();
            let mut data = a.data().to_vec();
            let mut inv = Vec::with_capacity(data.len() / d);
            for row in data.chunks_mut(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * s;
                }
                inv.push(s);
            }
            Ok((Tensor::new(a.shape().to_vec(), data)?, Saved::InvStd(inv)))
        }
        OpKind::Reshape(shape) => {
            let n: usize = shape.iter().product();
            if n != a.numel() {
                return Err(mismatch(op, format!("{:?} -> {:?}", a.shape(), shape)));
            }
            plain(Tensor::new(shape.clone(), a.data().to_vec())?)
        }
        OpKind::Permute(axes) => {
            let mut sorted = axes.clone();
            sorted.sort_unstable();
            if sorted != (0..a.rank()).collect::<Vec<_>>() {
                return Err(mismatch(op, format!("axes {axes:?} for rank {}", a.rank())));
            }
            let (shape, data) = kernels::permute(a.data(), a.shape(), axes);
            plain(Tensor::new(shape, data)?)
        }
        OpKind::Gather(indices) => {
            let rows = a.shape()[0];
            if indices.is_empty() {
                return Err(mismatch(op, "empty index set".into()));
            }
            if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
                return Err(mismatch(op, format!("index {bad} out of {rows} rows")));
            }
            let width = a.numel() / rows;
            let mut data = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                data.extend_from_slice(&a.data()[i * width..(i + 1) * width]);
            }
            let mut shape = a.shape().to_vec();
            shape[0] = indices.len();
            plain(Tensor::new(shape, data)?)
        }
        OpKind::Sum => plain(Tensor::scalar(a.data().iter().sum())),
        OpKind::Mean => plain(Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)),
        OpKind::SumAxis(axis) | OpKind::MeanAxis(axis) => {
            if *axis >= a.rank() {
                return Err(mismatch(op, format!("axis {axis} for rank {}", a.rank())));
            }
            let (outer, len, inner) = kernels::axis_split(a.shape(), *axis);
            let mut data = vec![0.0; outer * inner];
            let src = a.data();
            for o in 0..outer {
                for l in 0..len {
                    for k in 0..inner {
                        data[o * inner + k] += src[(o * len + l) * inner + k];
                    }
                }
            }
            if matches!(kind, OpKind::MeanAxis(_)) {
                for v in &mut data {
                    *v /= len as f64;
                }
            }
            let mut shape = a.shape().to_vec();
            shape.remove(*axis);
            if shape.is_empty() {
                shape.push(1);
            }
            plain(Tensor::new(shape, data)?)
        }
        OpKind::Cosine => {
            let b = b.unwrap();
            if a.shape() != b.shape() {
                return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let d = *a.shape().last().unwrap();
            let rows = a.numel() / d;
            let (mut na, mut nb, mut c) = (Vec::with_capacity(rows), Vec::with_capacity(rows), Vec::with_capacity(rows));
            for (ra, rb) in a.data().chunks(d).zip(b.data().chunks(d)) {
                let x = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
                let y = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
                if x == 0.0 || y == 0.0 {
                    return Err(TensorError::ZeroNorm);
                }
                let dot: f64 = ra.iter().zip(rb).map(|(p, q)| p * q).sum();
                c.push(dot / (x * y));
                na.push(x);
                nb.push(y);
            }
            Ok((Tensor::new(reduced_shape(a.shape()), c)?, Saved::Norms(na, nb)))
        }
        OpKind::Normalize => {
            let d = *a.shape().last().unwrap();
            let mut data = a.data().to_vec();
            let mut norms = Vec::with_capacity(data.len() / d);
            for row in data.chunks_mut(d) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < 1e-12 {
                    return Err(TensorError::ZeroNorm);
                }
                for v in row.iter_mut() {
                    *v /= n;
                }
                norms.push(n);
            }
            Ok((Tensor::new(a.shape().to_vec(), data)?, Saved::Norms(norms, vec![])))
        }
        OpKind::Concat => {
            let b = b.unwrap();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
                return Err(mismatch(op, format!("{sa:?} with {sb:?}")));
            }
            let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
            let mut data = Vec::with_capacity(a.numel() + b.numel());
            for (ra, rb) in a.data().chunks(da).zip(b.data().chunks(db)) {
                data.extend_from_slice(ra);
                data.extend_from_slice(rb);
            }
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = da + db;
            plain(Tensor::new(shape, data)?)
        }
    }
}

/// Evaluates a primitive on plain tensors without recording anything.
pub fn eval_primitive(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    if inputs.len() != kind.arity() {
        return Err(mismatch(kind.name(), format!("expected {} inputs, got {}", kind.arity(), inputs.len())));
    }
    let (value, _) = forward(kind, inputs[0], inputs.get(1).copied())?;
    if !value.is_finite() {
        return Err(TensorError::NonFinite { op: kind.name() });
    }
    Ok(value)
}
