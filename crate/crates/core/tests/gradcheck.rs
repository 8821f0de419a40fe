mod common;

use common::primitives::run_trials;
use selffed::microtensor::{Graph, Tensor};

#[test]
fn every_primitive_matches_finite_differences() {
    for (op, worst) in run_trials(7, 100) {
        assert!(worst <= 1e-4, "{op}: worst relative error {worst:e}");
    }
}

#[test]
fn fan_out_accumulates_like_duplicated_leaves() {
    // f(x) = sum(x * x + exp(x)) with x shared, against two independent copies.
    let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
    let mut g = Graph::new();
    let a = g.param(x.clone());
    let sq = g.mul(a, a).unwrap();
    let ex = g.exp(a).unwrap();
    let s = g.add(sq, ex).unwrap();
    let loss = g.sum(s).unwrap();
    let shared = g.backward(loss).unwrap().wrt(a).unwrap().clone();

    let mut g = Graph::new();
    let a1 = g.param(x.clone());
    let a2 = g.param(x.clone());
    let a3 = g.param(x.clone());
    let sq = g.mul(a1, a2).unwrap();
    let ex = g.exp(a3).unwrap();
    let s = g.add(sq, ex).unwrap();
    let loss = g.sum(s).unwrap();
    let grads = g.backward(loss).unwrap();
    for i in 0..3 {
        let summed = grads.wrt(a1).unwrap().data()[i] + grads.wrt(a2).unwrap().data()[i] + grads.wrt(a3).unwrap().data()[i];
        assert!((shared.data()[i] - summed).abs() < 1e-12);
    }
}

#[test]
fn sum_of_matmul_gradient_is_row_sums_of_b() {
    // d/dA sum(A·B) = 1·Bᵀ, i.e. every row equals the row sums of B.
    let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.25, -3.0, 1.5]).unwrap();
    let mut g = Graph::new();
    let ia = g.param(a.clone());
    let ib = g.input(b.clone());
    let p = g.matmul(ia, ib).unwrap();
    let s = g.sum(p).unwrap();
    let ga = g.backward(s).unwrap().wrt(ia).unwrap().clone();
    let row_sums = [-0.5, 2.25, -1.5];
    for r in 0..2 {
        for c in 0..3 {
            assert!((ga.data()[r * 3 + c] - row_sums[c]).abs() < 1e-12);
        }
    }
    let fd = common::gradcheck(&[a, b], |g, x| { let p = g.matmul(x[0], x[1])?; g.sum(p) }, 1e-5);
    assert!(fd <= 1e-4);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    for _ in 0..50 {
        let t = Tensor::randn(&[4, 7], 5.0, &mut rng);
        let mut g = Graph::new();
        let x = g.input(t);
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn layer_norm_standardizes_slices() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
    for _ in 0..50 {
        let t = Tensor::randn(&[3, 16], 2.0, &mut rng);
        let mut g = Graph::new();
        let x = g.input(t);
        let y = g.layer_norm(x).unwrap();
        for row in g.value(y).data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-8);
        }
    }
}

#[test]
fn two_sgd_steps_on_a_linear_model_equal_one_summed_step() {
    // loss(w) = sum(w ⊙ c) has a constant gradient c, so two steps of size η
    // equal one step along the summed gradient 2c.
    use selffed::microtensor::{sgd_step, ModelParams, NamedGrads};
    let c = Tensor::from_vec(vec![0.5, -2.0, 1.25]);
    let grad_of = |p: &ModelParams| {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let k = g.input(c.clone());
        let m = g.mul(b.id("w").unwrap(), k).unwrap();
        let s = g.sum(m).unwrap();
        b.collect(&g.backward(s).unwrap())
    };
    let mut p = ModelParams::new();
    p.insert("w", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let mut twice = p.clone();
    for _ in 0..2 {
        let g = grad_of(&twice);
        sgd_step(&mut twice, &g, 0.1).unwrap();
    }
    let mut once = p.clone();
    let g1 = grad_of(&p);
    let mut summed = NamedGrads::new();
    summed.insert("w", g1.get("w").unwrap().map(|v| 2.0 * v));
    sgd_step(&mut once, &summed, 0.1).unwrap();
    assert!(twice.max_abs_diff(&once) < 1e-15);
}
