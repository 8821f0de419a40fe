use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::{ModelParams, NamedGrads};
use super::tensor::{Result, TensorError};

/// Plain gradient descent `w ← w − lr·∇L` on every trainable entry.
///
/// The update is computed in full before any tensor is overwritten, so an
/// error leaves `params` untouched.
pub fn sgd_step(params: &mut ModelParams, grads: &NamedGrads, lr: f64) -> Result<()> {
    let mut updates = Vec::new();
    for (name, t) in params.iter() {
        if !params.is_trainable(name) {
            continue;
        }
        let g = grads.get(name).ok_or_else(|| TensorError::MissingGradient(name.to_string()))?;
        let next: Vec<f64> = t.data().iter().zip(g.data()).map(|(w, g)| w - lr * g).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "sgd_step" });
        }
        updates.push((name.to_string(), next));
    }
    commit(params, updates);
    Ok(())
}

fn commit(params: &mut ModelParams, updates: Vec<(String, Vec<f64>)>) {
    for (name, next) in updates {
        params.get_mut(&name).expect("name came from params").data_mut().copy_from_slice(&next);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

/// AdamW with the usual PyTorch defaults.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, step: 0, moments: HashMap::new() }
    }
}

impl AdamW {
    pub fn step(&mut self, params: &mut ModelParams, grads: &NamedGrads, lr: f64) -> Result<()> {
        let t = self.step + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let mut updates = Vec::new();
        let mut moments = Vec::new();
        for (name, w) in params.iter() {
            if !params.is_trainable(name) {
                continue;
            }
            let g = grads.get(name).ok_or_else(|| TensorError::MissingGradient(name.to_string()))?;
            let (m, v) = self
                .moments
                .get(name)
                .cloned()
                .unwrap_or_else(|| (vec![0.0; w.numel()], vec![0.0; w.numel()]));
            let mut m2 = m;
            let mut v2 = v;
            let mut next = Vec::with_capacity(w.numel());
            for i in 0..w.numel() {
                let gi = g.data()[i];
                m2[i] = self.beta1 * m2[i] + (1.0 - self.beta1) * gi;
                v2[i] = self.beta2 * v2[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m2[i] / bc1;
                let vhat = v2[i] / bc2;
                let wi = w.data()[i] * (1.0 - lr * self.weight_decay);
                next.push(wi - lr * mhat / (vhat.sqrt() + self.eps));
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "adamw_step" });
            }
            updates.push((name.to_string(), next));
            moments.push((name.to_string(), (m2, v2)));
        }
        commit(params, updates);
        self.moments.extend(moments);
        self.step = t;
        Ok(())
    }
}

/// Optimizer state for one local training session.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    AdamW(AdamW),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adamw => Optimizer::AdamW(AdamW::default()),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &NamedGrads, lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => sgd_step(params, grads, lr),
            Optimizer::AdamW(a) => a.step(params, grads, lr),
        }
    }
}
