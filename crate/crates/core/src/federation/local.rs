use rand::seq::SliceRandom;
use rand::Rng;

use super::protocol::Protocol;
use super::{ClientState, FedError, Result};
use crate::datalab::Dataset;
use crate::microtensor::{Graph, ModelParams, Optimizer, Tensor};
use crate::patching::{augment, partition_batch, sample_mask, MaskPlan};
use crate::ssl_losses::{cross_entropy_graph, masked_mse_graph};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    /// Encoder and decoder after local training.
    pub weights: ModelParams,
    /// Reconstruction loss of every step.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    /// The only part sent back for aggregation.
    pub encoder: ModelParams,
    /// Stays with the client.
    pub classifier: ModelParams,
    pub losses: Vec<f64>,
    /// Accuracy on the labeled shard before and after local training.
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

fn batches<R: Rng + ?Sized>(positions: &[usize], batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order = positions.to_vec();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Linear warmup over the first `warmup` epochs of the run.
fn warmup_lr(base: f64, epoch: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((epoch + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// Masked auto-encoding on the client's images, starting from `global`
/// (encoder and decoder). `prior_rounds` is how many earlier rounds this
/// client trained in; it places the local epochs on the warmup schedule.
pub fn local_pretrain<R: Rng + ?Sized>(
    proto: &Protocol,
    client: &ClientState,
    global: &ModelParams,
    train: &Dataset,
    prior_rounds: usize,
    rng: &mut R,
) -> Result<PretrainOutcome> {
    if client.unlabeled.is_empty() {
        return Err(FedError::EmptyShard(client.id));
    }
    let model = &proto.model;
    let grid = model.patch_grid();
    let fed = &proto.fed;
    let mut params = global.clone();
    let mut opt = Optimizer::new(fed.optimizer);
    let mut losses = vec![];
    for epoch in 0..fed.local_epochs {
        let lr = warmup_lr(fed.lr_pretrain, prior_rounds * fed.local_epochs + epoch, fed.warmup_epochs);
        for batch in batches(&client.unlabeled, fed.batch_size, rng) {
            let imgs = batch
                .iter()
                .map(|&i| augment(&train.images[i], &proto.pretrain_aug, rng))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let plans = imgs
                .iter()
                .map(|_| sample_mask(grid.count(), proto.mask_ratio, rng))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let img_refs: Vec<&Tensor> = imgs.iter().collect();
            let plan_refs: Vec<&MaskPlan> = plans.iter().collect();
            let patches = partition_batch(&img_refs, grid)?;
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let x = g.input(patches.clone());
            let t = model.embed(&mut g, &p, x, &plan_refs)?;
            let e = model.encode(&mut g, &p, t)?;
            let y = model.decode(&mut g, &p, e)?;
            let y = g.reshape(y, &[imgs.len() * grid.count(), grid.patch_len()])?;
            let loss = masked_mse_graph(&mut g, y, &patches, &plan_refs)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(FedError::NonFinite(client.id));
            }
            losses.push(value);
            let grads = p.collect(&g.backward(loss)?);
            opt.step(&mut params, &grads, lr)?;
        }
    }
    Ok(PretrainOutcome { weights: params, losses })
}

/// Predicted labels for `positions`, unaugmented and unmasked.
pub(crate) fn predict_labels(proto: &Protocol, weights: &ModelParams, data: &Dataset, positions: &[usize]) -> Result<Vec<usize>> {
    let model = &proto.model;
    let r = model.patch_grid().count();
    let mut out = Vec::with_capacity(positions.len());
    for chunk in positions.chunks(proto.fed.batch_size.max(1)) {
        let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &data.images[i]).collect();
        let plans: Vec<MaskPlan> = chunk.iter().map(|_| MaskPlan::from_masked(r, 0.0, &[])).collect();
        let refs: Vec<&MaskPlan> = plans.iter().collect();
        let mut g = Graph::new();
        let p = weights.bind(&mut g);
        let x = g.input(partition_batch(&imgs, model.patch_grid())?);
        let f = model.features(&mut g, &p, x, &refs)?;
        let z = model.classify(&mut g, &p, f)?;
        let logits = g.value(z);
        let classes = logits.shape()[1];
        for b in 0..chunk.len() {
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let best = (0..classes).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            out.push(best);
        }
    }
    Ok(out)
}

fn shard_accuracy(proto: &Protocol, weights: &ModelParams, data: &Dataset, positions: &[usize]) -> Result<f64> {
    let pred = predict_labels(proto, weights, data, positions)?;
    let hits = pred.iter().zip(positions).filter(|(p, &i)| **p == data.labels[i]).count();
    Ok(hits as f64 / positions.len() as f64)
}

/// Supervised training of `global_encoder` plus the client's private
/// classifier on its labeled shard.
pub fn local_finetune<R: Rng + ?Sized>(
    proto: &Protocol,
    client: &ClientState,
    global_encoder: &ModelParams,
    train: &Dataset,
    rng: &mut R,
) -> Result<FinetuneOutcome> {
    if client.labeled.is_empty() {
        return Err(FedError::EmptyLabeledShard(client.id));
    }
    let model = &proto.model;
    let grid = model.patch_grid();
    let fed = &proto.fed;
    let classifier = match &client.classifier {
        Some(c) => c.clone(),
        None => model.init_classifier(rng),
    };
    let mut params = global_encoder.clone();
    params.merge(&classifier);
    let accuracy_before = shard_accuracy(proto, &params, train, &client.labeled)?;
    let mut opt = Optimizer::new(fed.optimizer);
    let mut losses = vec![];
    for _ in 0..fed.local_epochs {
        for batch in batches(&client.labeled, fed.batch_size, rng) {
            let imgs = batch
                .iter()
                .map(|&i| augment(&train.images[i], &proto.finetune_aug, rng))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let img_refs: Vec<&Tensor> = imgs.iter().collect();
            let plans: Vec<MaskPlan> = imgs.iter().map(|_| MaskPlan::from_masked(grid.count(), 0.0, &[])).collect();
            let plan_refs: Vec<&MaskPlan> = plans.iter().collect();
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let x = g.input(partition_batch(&img_refs, grid)?);
            let f = model.features(&mut g, &p, x, &plan_refs)?;
            let z = model.classify(&mut g, &p, f)?;
            let loss = cross_entropy_graph(&mut g, z, &labels)?;
            losses.push(g.value(loss).item());
            let grads = p.collect(&g.backward(loss)?);
            opt.step(&mut params, &grads, fed.lr_finetune)?;
        }
    }
    let accuracy_after = shard_accuracy(proto, &params, train, &client.labeled)?;
    Ok(FinetuneOutcome {
        encoder: params.section("enc."),
        classifier: params.section("cls."),
        losses,
        accuracy_before,
        accuracy_after,
    })
}
