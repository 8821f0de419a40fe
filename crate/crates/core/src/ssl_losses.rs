//! Training objectives: masked-patch reconstruction MSE, InfoNCE against a
//! FIFO memory queue, and cross-entropy.
//!
//! Every loss has a graph form used for training and a value form that
//! evaluates the same graph without gradients.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microtensor::{Graph, NodeId, Tensor, TensorError};
use crate::patching::{partition_patches, MaskPlan, PatchError, PatchGrid};

/// Tolerance on stored embedding norms.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("masked set is empty; reconstruction loss is undefined")]
    EmptyMaskSet,
    #[error("memory queue is empty")]
    EmptyQueue,
    #[error("temperature must be positive, got {0}")]
    ZeroTemperature(f64),
    #[error("embedding norm {0} is not 1")]
    NonUnitNorm(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Patch(#[from] PatchError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Whether the positive pair appears in the InfoNCE denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfoNceMode {
    #[default]
    WithPositive,
    NegativesOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// μ
    pub temperature: f64,
    /// N
    pub queue_capacity: usize,
    /// θ
    pub target_decay: f64,
    pub mode: InfoNceMode,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.2, queue_capacity: 256, target_decay: 0.99, mode: InfoNceMode::WithPositive }
    }
}

impl ContrastiveConfig {
    /// Returns the name of the first invalid field.
    pub fn invalid_field(&self) -> Option<&'static str> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            Some("temperature")
        } else if self.queue_capacity == 0 {
            Some("queue_capacity")
        } else if !(0.0..=1.0).contains(&self.target_decay) {
            Some("target_decay")
        } else {
            None
        }
    }
}

/// Fixed-capacity FIFO of unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0 && dim > 0, "queue capacity and dim must be positive");
        Self { capacity, dim, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(|v| v.as_slice())
    }

    /// Appends the rows of `batch` (`[B, dim]`) in order; see [`Self::push_rows`].
    pub fn push(&mut self, batch: &Tensor) -> Result<()> {
        if batch.rank() != 2 {
            return Err(LossError::Shape(format!("queue push {:?}, expected [_, {}]", batch.shape(), self.dim)));
        }
        let rows: Vec<&[f64]> = (0..batch.shape()[0]).map(|i| batch.row(i)).collect();
        self.push_rows(&rows)
    }

    /// Appends `rows` in order, evicting the oldest entries beyond capacity.
    /// Rejects the whole batch if any row has the wrong width or norm.
    pub fn push_rows(&mut self, rows: &[&[f64]]) -> Result<()> {
        for row in rows {
            if row.len() != self.dim {
                return Err(LossError::Shape(format!("queue row of width {}, expected {}", row.len(), self.dim)));
            }
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(LossError::NonUnitNorm(n));
            }
        }
        for row in rows {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(row.to_vec());
        }
        Ok(())
    }

    /// `[len, dim]`, oldest first.
    pub fn as_tensor(&self) -> Result<Tensor> {
        if self.entries.is_empty() {
            return Err(LossError::EmptyQueue);
        }
        let data = self.entries.iter().flatten().copied().collect();
        Ok(Tensor::new(vec![self.entries.len(), self.dim], data)?)
    }
}

fn check_temperature(mu: f64) -> Result<()> {
    if mu > 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(LossError::ZeroTemperature(mu))
    }
}

/// Mean over the batch of the per-image masked reconstruction loss: for each
/// image, the mean over masked patches of the per-patch pixel mean squared
/// error. `pred` is `[B·R, P]`, `target` the matching constant patches.
pub fn masked_mse_graph(g: &mut Graph, pred: NodeId, target: &Tensor, plans: &[&MaskPlan]) -> Result<NodeId> {
    let shape = g.shape(pred).to_vec();
    if shape != target.shape() || shape.len() != 2 || plans.is_empty() || !shape[0].is_multiple_of(plans.len()) {
        return Err(LossError::Shape(format!("pred {:?}, target {:?}, {} plans", shape, target.shape(), plans.len())));
    }
    let (rows, p) = (shape[0], shape[1]);
    let r = rows / plans.len();
    let mut weights = vec![0.0; rows * p];
    for (b, plan) in plans.iter().enumerate() {
        if plan.patch_count() != r {
            return Err(LossError::Shape(format!("plan over {} patches, expected {r}", plan.patch_count())));
        }
        if plan.masked.is_empty() {
            return Err(LossError::EmptyMaskSet);
        }
        let w = 1.0 / (plans.len() * plan.masked.len() * p) as f64;
        for &j in &plan.masked {
            weights[(b * r + j) * p..(b * r + j + 1) * p].fill(w);
        }
    }
    let t = g.input(target.clone());
    let d = g.sub(pred, t)?;
    let sq = g.square(d)?;
    let w = g.input(Tensor::new(shape, weights)?);
    let weighted = g.mul(sq, w)?;
    Ok(g.sum(weighted)?)
}

/// Masked reconstruction loss between two `H×W×C` images.
pub fn masked_mse(pred: &Tensor, target: &Tensor, plan: &MaskPlan, grid: &PatchGrid) -> Result<f64> {
    if pred.shape() != target.shape() || pred.shape() != grid.image_shape() {
        return Err(LossError::Shape(format!("pred {:?}, target {:?}, grid {:?}", pred.shape(), target.shape(), grid.image_shape())));
    }
    let mut g = Graph::new();
    let x = g.input(partition_patches(pred, grid.patch)?);
    let y = partition_patches(target, grid.patch)?;
    let loss = masked_mse_graph(&mut g, x, &y, &[plan])?;
    Ok(g.value(loss).item())
}

/// InfoNCE from precomputed similarities. Uses a shifted log-sum-exp.
pub fn info_nce_from_similarities(positive: f64, negatives: &[f64], mu: f64, mode: InfoNceMode) -> Result<f64> {
    check_temperature(mu)?;
    if negatives.is_empty() {
        return Err(LossError::EmptyQueue);
    }
    let pos = positive / mu;
    let terms: Vec<f64> = match mode {
        InfoNceMode::WithPositive => std::iter::once(pos).chain(negatives.iter().map(|c| c / mu)).collect(),
        InfoNceMode::NegativesOnly => negatives.iter().map(|c| c / mu).collect(),
    };
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

/// Batch-mean InfoNCE. `q_plus` (`[B, d]`) carries gradient; `q_plusplus`
/// and the queue are constants. All embeddings are expected to be unit
/// vectors, so inner products are cosines.
pub fn info_nce_graph(g: &mut Graph, q_plus: NodeId, q_plusplus: &Tensor, queue: &MemoryQueue, mu: f64, mode: InfoNceMode) -> Result<NodeId> {
    check_temperature(mu)?;
    let negatives = queue.as_tensor()?;
    let shape = g.shape(q_plus).to_vec();
    if shape.len() != 2 || shape != q_plusplus.shape() || shape[1] != queue.dim() {
        return Err(LossError::Shape(format!("q+ {:?}, q++ {:?}, queue dim {}", shape, q_plusplus.shape(), queue.dim())));
    }
    let (b, n) = (shape[0], queue.len());
    let target = g.input(q_plusplus.clone());
    let prod = g.mul(q_plus, target)?;
    let pos = g.sum_axis(prod, 1)?;
    let pos = g.reshape(pos, &[b, 1])?;
    let neg_t = g.input(negatives);
    let neg_t = g.transpose(neg_t)?;
    let neg = g.matmul(q_plus, neg_t)?;
    let pick_first = |g: &mut Graph, cols: usize, x: NodeId| -> Result<NodeId> {
        let mut hot = vec![0.0; b * cols];
        for i in 0..b {
            hot[i * cols] = 1.0;
        }
        let hot = g.input(Tensor::new(vec![b, cols], hot)?);
        let picked = g.mul(x, hot)?;
        Ok(g.sum_axis(picked, 1)?)
    };
    let per_sample = match mode {
        InfoNceMode::WithPositive => {
            let logits = g.concat(pos, neg)?;
            let logits = g.scale(logits, 1.0 / mu)?;
            let ls = g.log_softmax(logits)?;
            let first = pick_first(g, n + 1, ls)?;
            g.scale(first, -1.0)?
        }
        InfoNceMode::NegativesOnly => {
            // LSE(neg) - pos == neg_0 - log_softmax(neg)_0 - pos
            let neg = g.scale(neg, 1.0 / mu)?;
            let ls = g.log_softmax(neg)?;
            let ls0 = pick_first(g, n, ls)?;
            let n0 = pick_first(g, n, neg)?;
            let lse = g.sub(n0, ls0)?;
            let pos = g.reshape(pos, &[b])?;
            let pos = g.scale(pos, 1.0 / mu)?;
            g.sub(lse, pos)?
        }
    };
    Ok(g.mean(per_sample)?)
}

/// InfoNCE for one pair of unit embeddings.
pub fn info_nce(q_plus: &[f64], q_plusplus: &[f64], queue: &MemoryQueue, mu: f64, mode: InfoNceMode) -> Result<f64> {
    check_temperature(mu)?;
    if queue.is_empty() {
        return Err(LossError::EmptyQueue);
    }
    let d = q_plus.len();
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, d], q_plus.to_vec())?);
    let y = Tensor::new(vec![1, q_plusplus.len()], q_plusplus.to_vec())?;
    let loss = info_nce_graph(&mut g, x, &y, queue, mu, mode)?;
    Ok(g.value(loss).item())
}

/// Batch-mean cross-entropy of `[B, Ω]` logits.
pub fn cross_entropy_graph(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(LossError::Shape(format!("logits {:?} for {} labels", shape, labels.len())));
    }
    let (b, classes) = (shape[0], shape[1]);
    let mut hot = vec![0.0; b * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(LossError::LabelOutOfRange { label: y, classes });
        }
        hot[i * classes + y] = -1.0 / b as f64;
    }
    let ls = g.log_softmax(logits)?;
    let hot = g.input(Tensor::new(shape, hot)?);
    let picked = g.mul(ls, hot)?;
    Ok(g.sum(picked)?)
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, logits.len()], logits.to_vec())?);
    let loss = cross_entropy_graph(&mut g, x, &[label])?;
    Ok(g.value(loss).item())
}
