//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod model;
pub mod primitives;

use selffed::microtensor::{Graph, NodeId, Result, Tensor};

/// Absolute floor applied to the denominator of the relative error so that
/// near-zero gradient entries are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Worst relative error between reverse-mode gradients and central finite
/// differences, over every entry of every input. The numeric side only ever
/// evaluates forward values.
pub fn gradcheck<F>(inputs: &[Tensor], build: F, step: f64) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = build(&mut g, &ids).expect("forward");
        g.value(out).item()
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = build(&mut g, &ids).expect("forward");
    let grads = g.backward(out).expect("backward");
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(ids[k]).unwrap();
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Same as [`gradcheck`] but only over the listed `(input, entry)` pairs.
pub fn gradcheck_entries<F>(inputs: &[Tensor], entries: &[(usize, usize)], build: F, step: f64) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = build(&mut g, &ids).expect("forward");
        g.value(out).item()
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = build(&mut g, &ids).expect("forward");
    let grads = g.backward(out).expect("backward");
    let mut worst = 0.0f64;
    for &(k, i) in entries {
        let mut plus = inputs.to_vec();
        plus[k].data_mut()[i] += step;
        let mut minus = inputs.to_vec();
        minus[k].data_mut()[i] -= step;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
        worst = worst.max(rel_err(grads.wrt(ids[k]).unwrap().data()[i], numeric));
    }
    worst
}
