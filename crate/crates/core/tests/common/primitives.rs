//! Randomized finite-difference trials for every primitive.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selffed::microtensor::{Graph, NodeId, Result, Tensor};

use super::gradcheck;

pub const STEP: f64 = 1e-5;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero, so kinks are never straddled.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.05f64.copysign(*v);
        }
    }
    t
}

fn dims(rng: &mut ChaCha8Rng, rank: usize, max_numel: usize) -> Vec<usize> {
    loop {
        let d: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=4)).collect();
        if d.iter().product::<usize>() <= max_numel {
            return d;
        }
    }
}

/// Contracts an arbitrary-shape output with fixed random weights into a scalar.
fn project(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(g.shape(y), &mut rng);
    let w = g.input(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

fn case(rng: &mut ChaCha8Rng, op: &str) -> (Vec<Tensor>, Builder) {
    let seed: u64 = rng.random();
    let unary = |f: fn(&mut Graph, NodeId) -> Result<NodeId>| -> Builder {
        Box::new(move |g, x| {
            let y = f(g, x[0])?;
            project(g, y, seed)
        })
    };
    let rank = rng.random_range(1..=3);
    match op {
        "matmul" => {
            let (b, m, k, n) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
            match rng.random_range(0..3) {
                0 => (vec![randn(&[m, k], rng), randn(&[k, n], rng)], Box::new(move |g, x| { let y = g.matmul(x[0], x[1])?; project(g, y, seed) })),
                1 => (vec![randn(&[b, m, k], rng), randn(&[b, k, n], rng)], Box::new(move |g, x| { let y = g.matmul(x[0], x[1])?; project(g, y, seed) })),
                _ => (vec![randn(&[b, m, k], rng), randn(&[k, n], rng)], Box::new(move |g, x| { let y = g.matmul(x[0], x[1])?; project(g, y, seed) })),
            }
        }
        "add" | "sub" | "mul" => {
            let a = dims(rng, rank, 64);
            let b = if rng.random_bool(0.5) { a.clone() } else { a[rng.random_range(0..a.len())..].to_vec() };
            let op = op.to_string();
            (vec![randn(&a, rng), randn(&b, rng)], Box::new(move |g, x| {
                let y = match op.as_str() { "add" => g.add(x[0], x[1])?, "sub" => g.sub(x[0], x[1])?, _ => g.mul(x[0], x[1])? };
                project(g, y, seed)
            }))
        }
        "scale" => {
            let f: f64 = rng.random_range(-3.0..3.0);
            (vec![randn(&dims(rng, rank, 64), rng)], Box::new(move |g, x| { let y = g.scale(x[0], f)?; project(g, y, seed) }))
        }
        "relu" => (vec![away_from_zero(&dims(rng, rank, 64), rng)], unary(|g, x| g.relu(x))),
        "gelu" => (vec![randn(&dims(rng, rank, 64), rng)], unary(|g, x| g.gelu(x))),
        "softmax" => (vec![randn(&dims(rng, rank, 64), rng)], unary(|g, x| g.softmax(x))),
        "log_softmax" => (vec![randn(&dims(rng, rank, 64), rng)], unary(|g, x| g.log_softmax(x))),
        "layer_norm" => {
            let mut d = dims(rng, rank, 32);
            *d.last_mut().unwrap() += 1;
            (vec![randn(&d, rng)], unary(|g, x| g.layer_norm(x)))
        }
        "reshape" => {
            let d = dims(rng, rank, 64);
            let n: usize = d.iter().product();
            (vec![randn(&d, rng)], Box::new(move |g, x| { let y = g.reshape(x[0], &[n])?; project(g, y, seed) }))
        }
        "permute" => {
            let d = dims(rng, rank, 64);
            let mut axes: Vec<usize> = (0..rank).collect();
            axes.shuffle(rng);
            (vec![randn(&d, rng)], Box::new(move |g, x| { let y = g.permute(x[0], &axes)?; project(g, y, seed) }))
        }
        "gather" => {
            let d = dims(rng, rank, 64);
            let rows = d[0];
            let idx: Vec<usize> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..rows)).collect();
            (vec![randn(&d, rng)], Box::new(move |g, x| { let y = g.gather(x[0], &idx)?; project(g, y, seed) }))
        }
        "sum" => (vec![randn(&dims(rng, rank, 64), rng)], Box::new(move |g, x| { let y = g.sum(x[0])?; g.square(y).and_then(|s| g.sum(s)) })),
        "mean" => (vec![randn(&dims(rng, rank, 64), rng)], Box::new(move |g, x| { let y = g.mean(x[0])?; g.square(y).and_then(|s| g.sum(s)) })),
        "sum_axis" | "mean_axis" => {
            let d = dims(rng, rank, 64);
            let axis = rng.random_range(0..rank);
            let mean = op == "mean_axis";
            (vec![randn(&d, rng)], Box::new(move |g, x| {
                let y = if mean { g.mean_axis(x[0], axis)? } else { g.sum_axis(x[0], axis)? };
                project(g, y, seed)
            }))
        }
        "square" => (vec![randn(&dims(rng, rank, 64), rng)], unary(|g, x| g.square(x))),
        "log" => {
            let t = Tensor::uniform(&dims(rng, rank, 64), 0.2, 3.0, rng);
            (vec![t], unary(|g, x| g.log(x)))
        }
        "exp" => (vec![randn(&dims(rng, rank, 64), rng)], unary(|g, x| g.exp(x))),
        "cosine" => {
            let mut d = dims(rng, rank, 32);
            *d.last_mut().unwrap() += 1;
            (vec![randn(&d, rng), randn(&d, rng)], Box::new(move |g, x| { let y = g.cosine(x[0], x[1])?; project(g, y, seed) }))
        }
        "normalize" => {
            let mut d = dims(rng, rank, 32);
            *d.last_mut().unwrap() += 1;
            (vec![randn(&d, rng)], unary(|g, x| g.normalize(x)))
        }
        "concat" => {
            let a = dims(rng, rank, 32);
            let mut b = a.clone();
            *b.last_mut().unwrap() = rng.random_range(1..=4);
            (vec![randn(&a, rng), randn(&b, rng)], Box::new(move |g, x| { let y = g.concat(x[0], x[1])?; project(g, y, seed) }))
        }
        other => panic!("unknown primitive {other}"),
    }
}

pub const PRIMITIVES: &[&str] = &[
    "matmul", "add", "sub", "mul", "scale", "relu", "gelu", "softmax", "log_softmax", "layer_norm", "reshape",
    "permute", "gather", "sum", "mean", "sum_axis", "mean_axis", "square", "log", "exp", "cosine", "normalize",
    "concat",
];

/// Worst relative error per primitive over `trials` random cases.
pub fn run_trials(seed: u64, trials: usize) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PRIMITIVES
        .iter()
        .map(|&op| {
            let worst = (0..trials)
                .map(|_| {
                    let (inputs, build) = case(&mut rng, op);
                    gradcheck(&inputs, build, STEP)
                })
                .fold(0.0, f64::max);
            (op, worst)
        })
        .collect()
}
