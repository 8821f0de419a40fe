use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use selffed::microtensor::{Binding, Graph, ModelParams, NodeId, Tensor};
use selffed::patching::{partition_patches, MaskPlan};
use selffed::swinlite::{ArchConfig, DecoderConfig, SwinLite};

use super::rel_err;

fn image(cfg: &ArchConfig, seed: u64) -> Tensor {
    Tensor::uniform(&[cfg.image_side, cfg.image_side, cfg.channels], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// 8×8 single-channel image in four 4×4 patches.
pub fn toy_config() -> ArchConfig {
    ArchConfig {
        image_side: 8,
        channels: 1,
        patch: 4,
        embed_dim: 4,
        stages: 2,
        blocks_per_stage: 1,
        window: 2,
        heads: vec![2, 2],
        mlp_ratio: 2,
        mask_token: true,
        decoder: DecoderConfig { blocks_per_stage: 1, heads: vec![2, 2] },
        proj_hidden: 4,
        proj_dim: 3,
        classifier_hidden: 4,
        num_classes: 2,
    }
}

/// Analytic gradients of `loss` w.r.t. every parameter against central
/// differences over the listed `(name, entry)` pairs; returns the worst relative error.
pub fn param_gradcheck<F>(weights: &ModelParams, entries: &[(String, usize)], loss: F, step: f64) -> f64
where
    F: Fn(&mut Graph, &Binding) -> NodeId,
{
    let mut g = Graph::new();
    let p = weights.bind(&mut g);
    let out = loss(&mut g, &p);
    let grads = p.collect(&g.backward(out).unwrap());
    let eval = |w: &ModelParams| {
        let mut g = Graph::new();
        let p = w.bind(&mut g);
        let out = loss(&mut g, &p);
        g.value(out).item()
    };
    let mut worst = 0.0f64;
    for (name, i) in entries {
        let mut plus = weights.clone();
        plus.get_mut(name).unwrap().data_mut()[*i] += step;
        let mut minus = weights.clone();
        minus.get_mut(name).unwrap().data_mut()[*i] -= step;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
        worst = worst.max(rel_err(grads.get(name).unwrap().data()[*i], numeric));
    }
    worst
}

/// Encoder and decoder under a masked reconstruction loss; checks up to
/// `per_tensor` entries of every weight tensor.
pub fn composite_gradcheck(cfg: ArchConfig, per_tensor: usize, seed: u64) -> f64 {
    let model = SwinLite::new(cfg.clone()).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut w = model.init_encoder(&mut r);
    w.merge(&model.init_decoder(&mut r));
    // Nonzero biases and tables so every path carries gradient.
    for (_, t) in w.iter_mut() {
        let jitter = Tensor::randn(t.shape(), 0.1, &mut r);
        for (v, j) in t.data_mut().iter_mut().zip(jitter.data()) {
            *v += j;
        }
    }
    let img = image(&cfg, seed + 1);
    let target = image(&cfg, seed + 2);
    let grid = *model.patch_grid();
    let r_count = grid.count();
    let plan = MaskPlan::from_masked(r_count, 0.5, &(0..r_count).step_by(2).collect::<Vec<_>>());
    let mut entries = vec![];
    for (n, t) in w.iter() {
        let k = t.numel();
        for j in 0..per_tensor.min(k) {
            entries.push((n.to_string(), (j * 7919 + 13) % k));
        }
    }
    param_gradcheck(
        &w,
        &entries,
        |g, p| {
            let x = g.input(partition_patches(&img, cfg.patch).unwrap());
            let t = model.embed(g, p, x, &[&plan]).unwrap();
            let e = model.encode(g, p, t).unwrap();
            let y = model.decode(g, p, e).unwrap();
            let y = g.reshape(y, &[r_count, grid.patch_len()]).unwrap();
            let tgt = g.input(partition_patches(&target, cfg.patch).unwrap());
            let d = g.sub(y, tgt).unwrap();
            let sq = g.square(d).unwrap();
            g.mean(sq).unwrap()
        },
        1e-5,
    )
}
