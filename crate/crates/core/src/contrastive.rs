//! Server-side consistency training: an online/target network pair tracked
//! by exponential moving average, two-view generation and the InfoNCE step.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microtensor::{Graph, ModelParams, Optimizer, Tensor, TensorError};
use crate::patching::{augment, partition_batch, sample_mask, AugmentSpec, MaskPlan, PatchError};
use crate::ssl_losses::{info_nce_graph, ContrastiveConfig, LossError, MemoryQueue};
use crate::swinlite::{ModelError, SwinLite};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContrastiveError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty view batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ContrastiveError>;

/// Where the two views come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewSource {
    /// Augment the decoder's reconstruction of a masked input.
    #[default]
    DecoderOutput,
    /// Augment the raw image.
    RawInput,
}

/// Online encoder + projection (`φ`), its predictor, and the EMA target (`q`).
#[derive(Debug, Clone, PartialEq)]
pub struct TwinNetworks {
    pub online: ModelParams,
    /// `pred.` layer, online branch only.
    pub predictor: ModelParams,
    /// Same names and shapes as `online`; every entry is frozen.
    pub target: ModelParams,
    pub theta: f64,
}

fn frozen_copy(p: &ModelParams) -> ModelParams {
    let mut out = ModelParams::new();
    for (n, t) in p.iter() {
        out.insert_frozen(n, t.clone());
    }
    out
}

impl TwinNetworks {
    pub fn new(online: ModelParams, predictor: ModelParams, theta: f64) -> Self {
        let target = frozen_copy(&online);
        Self { online, predictor, target, theta }
    }

    /// Fresh encoder and projection head with the target starting as a copy.
    pub fn init<R: Rng + ?Sized>(model: &SwinLite, theta: f64, rng: &mut R) -> Self {
        let mut online = model.init_encoder(rng);
        let proj = model.init_projection(rng);
        online.merge(&proj.section("proj."));
        Self::new(online, proj.section("pred."), theta)
    }

    pub fn online_encoder(&self) -> ModelParams {
        self.online.section("enc.")
    }

    /// Overwrites the online encoder tensors, e.g. with an aggregate.
    pub fn set_online_encoder(&mut self, encoder: &ModelParams) -> Result<()> {
        for (n, t) in encoder.iter() {
            let slot = self
                .online
                .get_mut(n)
                .ok_or_else(|| ContrastiveError::ShapeMismatch(format!("online network has no tensor {n}")))?;
            if slot.shape() != t.shape() {
                return Err(ContrastiveError::ShapeMismatch(format!("{n}: {:?} vs {:?}", slot.shape(), t.shape())));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.target, &self.online, self.theta)
    }
}

/// `q ← θ·q + (1−θ)·φ` for every tensor.
pub fn ema_update(target: &mut ModelParams, online: &ModelParams, theta: f64) -> Result<()> {
    if !target.same_layout(online) {
        return Err(ContrastiveError::ShapeMismatch("online and target layouts differ".into()));
    }
    for ((_, q), (_, phi)) in target.iter_mut().zip(online.iter()) {
        for (qv, pv) in q.data_mut().iter_mut().zip(phi.data()) {
            *qv = theta * *qv + (1.0 - theta) * pv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub plus: Tensor,
    pub plusplus: Tensor,
    pub source_id: u64,
}

/// Two independent augmentation draws of `source`.
pub fn make_views<R: Rng + ?Sized>(source: &Tensor, spec: &AugmentSpec, rng: &mut R, source_id: u64) -> Result<ViewPair> {
    let plus = augment(source, spec, rng)?;
    let plusplus = augment(source, spec, rng)?;
    Ok(ViewPair { plus, plusplus, source_id })
}

/// Decoder reconstructions of `images` under fresh masks of ratio `ratio`,
/// clamped to `[0, 1]`. `weights` must carry the encoder and decoder.
pub fn reconstruct<R: Rng + ?Sized>(model: &SwinLite, weights: &ModelParams, images: &[&Tensor], ratio: f64, rng: &mut R) -> Result<Vec<Tensor>> {
    if images.is_empty() {
        return Err(ContrastiveError::EmptyBatch);
    }
    let grid = model.patch_grid();
    let plans = images
        .iter()
        .map(|_| sample_mask(grid.count(), ratio, rng))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let plan_refs: Vec<&MaskPlan> = plans.iter().collect();
    let mut g = Graph::new();
    let p = frozen_copy(weights).bind(&mut g);
    let x = g.input(partition_batch(images, grid)?);
    let t = model.embed(&mut g, &p, x, &plan_refs)?;
    let e = model.encode(&mut g, &p, t)?;
    let y = model.decode(&mut g, &p, e)?;
    let out = g.value(y);
    let (r, pl) = (grid.count(), grid.patch_len());
    (0..images.len())
        .map(|b| {
            let patches = Tensor::new(vec![r, pl], out.data()[b * r * pl..(b + 1) * r * pl].iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
            Ok(crate::patching::reassemble(&patches, grid)?)
        })
        .collect()
}

fn unmasked_plans(model: &SwinLite, n: usize) -> Vec<MaskPlan> {
    let r = model.patch_grid().count();
    (0..n).map(|_| MaskPlan::from_masked(r, 0.0, &[])).collect()
}

/// Normalized projection embeddings `[B, d]` of unmasked images, no gradient.
pub fn embed_images(model: &SwinLite, weights: &ModelParams, images: &[&Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(ContrastiveError::EmptyBatch);
    }
    let plans = unmasked_plans(model, images.len());
    let refs: Vec<&MaskPlan> = plans.iter().collect();
    let mut g = Graph::new();
    let p = frozen_copy(weights).bind(&mut g);
    let x = g.input(partition_batch(images, model.patch_grid())?);
    let f = model.features(&mut g, &p, x, &refs)?;
    let z = model.project(&mut g, &p, f)?;
    Ok(g.value(z).clone())
}

/// Fills the queue with target embeddings of `images`.
pub fn warm_fill(model: &SwinLite, twins: &TwinNetworks, queue: &mut MemoryQueue, images: &[&Tensor]) -> Result<()> {
    let z = embed_images(model, &twins.target, images)?;
    queue.push(&z)?;
    Ok(())
}

/// One InfoNCE step: the online branch (with predictor) sees `ι₊`, the target
/// sees `ι₊₊`. Updates the online weights, applies EMA, then enqueues the
/// target embeddings. Returns the batch-mean loss before the update.
pub fn server_contrastive_step(
    model: &SwinLite,
    twins: &mut TwinNetworks,
    views: &[ViewPair],
    queue: &mut MemoryQueue,
    cfg: &ContrastiveConfig,
    optimizer: &mut Optimizer,
    lr: f64,
) -> Result<f64> {
    if views.is_empty() {
        return Err(ContrastiveError::EmptyBatch);
    }
    let pluses: Vec<&Tensor> = views.iter().map(|v| &v.plus).collect();
    let targets: Vec<&Tensor> = views.iter().map(|v| &v.plusplus).collect();
    let q_pp = embed_images(model, &twins.target, &targets)?;

    let mut trainable = twins.online.clone();
    trainable.merge(&twins.predictor);
    let plans = unmasked_plans(model, views.len());
    let refs: Vec<&MaskPlan> = plans.iter().collect();
    let mut g = Graph::new();
    let p = trainable.bind(&mut g);
    let x = g.input(partition_batch(&pluses, model.patch_grid())?);
    let f = model.features(&mut g, &p, x, &refs)?;
    let z = model.project(&mut g, &p, f)?;
    let q_plus = model.predict(&mut g, &p, z)?;
    let loss = info_nce_graph(&mut g, q_plus, &q_pp, queue, cfg.temperature, cfg.mode)?;
    let value = g.value(loss).item();
    let grads = p.collect(&g.backward(loss)?);
    optimizer.step(&mut trainable, &grads, lr)?;

    for (n, t) in twins.online.iter_mut() {
        t.data_mut().copy_from_slice(trainable.get(n).expect("merged").data());
    }
    for (n, t) in twins.predictor.iter_mut() {
        t.data_mut().copy_from_slice(trainable.get(n).expect("merged").data());
    }
    twins.ema_update()?;
    queue.push(&q_pp)?;
    Ok(value)
}
