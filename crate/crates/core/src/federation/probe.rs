use serde::{Deserialize, Serialize};

use super::{FedError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Full-batch gradient steps.
    pub iterations: usize,
    pub lr: f64,
    /// Weight decay on the weights, not the bias.
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { iterations: 300, lr: 0.5, l2: 1e-4 }
    }
}

/// Softmax regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// `[classes][dim]`
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

impl LinearProbe {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.inv_std).map(|((v, m), s)| (v - m) * s).collect()
    }

    fn logits_std(&self, x: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(&self.bias).map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.logits_std(&self.standardize(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        (0..z.len()).fold(0, |best, c| if z[c] > z[best] { c } else { best })
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let hits = features.iter().zip(labels).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / features.len() as f64
    }
}

/// Fits a probe by full-batch gradient descent from zero weights.
pub fn fit_probe(features: &[Vec<f64>], labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    let n = features.len();
    if n == 0 || labels.len() != n {
        return Err(FedError::ShapeMismatch(format!("{n} feature rows, {} labels", labels.len())));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(FedError::ShapeMismatch("ragged feature rows".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(FedError::ShapeMismatch(format!("label {bad} with {classes} classes")));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for f in features {
        for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    let inv_std = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    let mut probe = LinearProbe { mean, inv_std, weights: vec![vec![0.0; d]; classes], bias: vec![0.0; classes] };
    let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
    for _ in 0..cfg.iterations {
        let mut gw = vec![vec![0.0; d]; classes];
        let mut gb = vec![0.0; classes];
        for (x, &y) in xs.iter().zip(labels) {
            let mut p = probe.logits_std(x);
            softmax_in_place(&mut p);
            p[y] -= 1.0;
            for c in 0..classes {
                gb[c] += p[c] / n as f64;
                for (g, v) in gw[c].iter_mut().zip(x) {
                    *g += p[c] * v / n as f64;
                }
            }
        }
        for c in 0..classes {
            probe.bias[c] -= cfg.lr * gb[c];
            for (w, g) in probe.weights[c].iter_mut().zip(&gw[c]) {
                *w -= cfg.lr * (g + cfg.l2 * *w);
            }
        }
    }
    Ok(probe)
}
