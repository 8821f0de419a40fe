use std::path::PathBuf;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::local::{local_finetune, local_pretrain};
use super::probe::{fit_probe, ProbeConfig};
use super::{aggregate_selffed, aggregation_weights, derive_seed, select_clients, ClientState, FedError, FederationConfig, Result};
use crate::contrastive::{make_views, reconstruct, server_contrastive_step, warm_fill, TwinNetworks, ViewPair, ViewSource};
use crate::datalab::Dataset;
use crate::microtensor::{Graph, ModelParams, Optimizer, Tensor};
use crate::patching::{partition_batch, sample_mask, AugmentSpec, MaskPlan};
use crate::ssl_losses::{masked_mse_graph, ContrastiveConfig, MemoryQueue};
use crate::swinlite::SwinLite;

const TAG_SELECT: u64 = 0;
const TAG_CLIENT: u64 = 1;
const TAG_SERVER: u64 = 2;
const TAG_EVAL: u64 = 3;

/// Everything a run needs besides data and mutable state.
#[derive(Debug, Clone)]
pub struct Protocol {
    pub model: SwinLite,
    pub fed: FederationConfig,
    pub contrastive: ContrastiveConfig,
    pub pretrain_aug: AugmentSpec,
    pub finetune_aug: AugmentSpec,
    /// ψ
    pub mask_ratio: f64,
    pub probe: ProbeConfig,
    /// Threads for local training; 1 runs sequentially.
    pub workers: usize,
    pub seed: u64,
    /// When set, every round's global weights are written here.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Protocol {
    /// Default augmentations and probe for `model` and `fed`.
    pub fn new(model: SwinLite, fed: FederationConfig, seed: u64) -> Self {
        let side = model.config().image_side;
        Self {
            model,
            fed,
            contrastive: ContrastiveConfig::default(),
            pretrain_aug: AugmentSpec::pretrain_default(side),
            finetune_aug: AugmentSpec::finetune_default(side),
            mask_ratio: 0.6,
            probe: ProbeConfig::default(),
            workers: 1,
            seed,
            checkpoint_dir: None,
        }
    }

    fn rng(&self, tags: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, tags))
    }
}

/// Data shared by a run. Client shards index into `train`.
#[derive(Debug, Clone)]
pub struct FedData {
    pub train: Dataset,
    /// Held-out accuracy and reconstruction loss are measured here.
    pub test: Dataset,
    /// Labeled set the evaluation probe is fit on.
    pub calibration: Dataset,
    /// Unlabeled images the server draws its views from.
    pub server_pool: Dataset,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub twins: TwinNetworks,
    /// Global decoder, merged in phase 1 alongside the encoder.
    pub decoder: ModelParams,
    pub queue: MemoryQueue,
    pub optimizer: Optimizer,
    pub queue_warm: bool,
}

impl ServerState {
    pub fn new(proto: &Protocol) -> Self {
        let mut rng = proto.rng(&[TAG_SERVER]);
        let twins = TwinNetworks::init(&proto.model, proto.contrastive.target_decay, &mut rng);
        let decoder = proto.model.init_decoder(&mut rng);
        let queue = MemoryQueue::new(proto.contrastive.queue_capacity, proto.model.config().proj_dim);
        Self { twins, decoder, queue, optimizer: Optimizer::new(proto.fed.optimizer), queue_warm: false }
    }

    /// Online encoder and the decoder.
    pub fn autoencoder(&self) -> ModelParams {
        let mut p = self.twins.online_encoder();
        p.merge(&self.decoder);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    /// 1-based within the phase.
    pub round: usize,
    pub phase: u8,
    pub selected: Vec<usize>,
    /// Mean training loss of each selected client.
    pub client_losses: Vec<f64>,
    /// Effective aggregation coefficients, in `selected` order.
    pub weights: Vec<f64>,
    pub weight_sum: f64,
    pub test_accuracy: Option<f64>,
    pub eval_loss: Option<f64>,
    pub server_loss: Option<f64>,
    pub wall_ms: u64,
}

/// Seed of client `id`'s local training in `round` of `phase`.
pub fn client_seed(seed: u64, phase: u8, round: usize, id: usize) -> u64 {
    derive_seed(seed, &[phase as u64, round as u64, TAG_CLIENT, id as u64])
}

pub fn checkpoint_name(phase: u8, round: usize) -> String {
    format!("round_{phase}_{round}.sfwt")
}

fn save_checkpoint(proto: &Protocol, phase: u8, round: usize, weights: &ModelParams) -> Result<()> {
    if let Some(dir) = &proto.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        weights.save(dir.join(checkpoint_name(phase, round)))?;
    }
    Ok(())
}

/// Per-client work in client-id order, across `workers` threads.
fn run_clients<T: Send>(
    proto: &Protocol,
    selected: &[usize],
    work: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    if proto.workers <= 1 {
        return selected.iter().map(|&i| work(i)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(proto.workers)
        .build()
        .map_err(|e| FedError::Config { field: "workers", reason: e.to_string() })?;
    pool.install(|| selected.par_iter().map(|&i| work(i)).collect())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn is_eval_round(cfg: &FederationConfig, round: usize, last: usize) -> bool {
    round.is_multiple_of(cfg.eval_every) || round == last
}

/// Mean masked reconstruction loss over the first `eval_samples` images of
/// `data`, with masks fixed by the run seed.
pub fn eval_reconstruction(proto: &Protocol, weights: &ModelParams, data: &Dataset) -> Result<f64> {
    let n = proto.fed.eval_samples.min(data.len());
    if n == 0 {
        return Ok(f64::NAN);
    }
    let model = &proto.model;
    let grid = model.patch_grid();
    let mut rng = proto.rng(&[TAG_EVAL]);
    let plans = (0..n)
        .map(|_| sample_mask(grid.count(), proto.mask_ratio, &mut rng))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut total = 0.0;
    let positions: Vec<usize> = (0..n).collect();
    for chunk in positions.chunks(proto.fed.batch_size) {
        let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &data.images[i]).collect();
        let refs: Vec<&MaskPlan> = chunk.iter().map(|&i| &plans[i]).collect();
        let patches = partition_batch(&imgs, grid)?;
        let mut g = Graph::new();
        let p = weights.bind(&mut g);
        let x = g.input(patches.clone());
        let t = model.embed(&mut g, &p, x, &refs)?;
        let e = model.encode(&mut g, &p, t)?;
        let y = model.decode(&mut g, &p, e)?;
        let y = g.reshape(y, &[chunk.len() * grid.count(), grid.patch_len()])?;
        let loss = masked_mse_graph(&mut g, y, &patches, &refs)?;
        total += g.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

/// Mean-pooled encoder features of every image in `data`, unmasked.
pub fn encoder_features(proto: &Protocol, encoder: &ModelParams, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let model = &proto.model;
    let r = model.patch_grid().count();
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.images.chunks(proto.fed.batch_size) {
        let imgs: Vec<&Tensor> = chunk.iter().collect();
        let plans: Vec<MaskPlan> = chunk.iter().map(|_| MaskPlan::from_masked(r, 0.0, &[])).collect();
        let refs: Vec<&MaskPlan> = plans.iter().collect();
        let mut g = Graph::new();
        let p = encoder.bind(&mut g);
        let x = g.input(partition_batch(&imgs, model.patch_grid())?);
        let f = model.features(&mut g, &p, x, &refs)?;
        let f = g.value(f);
        let d = f.shape()[1];
        out.extend((0..chunk.len()).map(|b| f.data()[b * d..(b + 1) * d].to_vec()));
    }
    Ok(out)
}

/// Test accuracy of a linear probe on frozen encoder features, fit on the
/// calibration set.
pub fn probe_accuracy(proto: &Protocol, encoder: &ModelParams, calibration: &Dataset, test: &Dataset) -> Result<f64> {
    let train_x = encoder_features(proto, encoder, calibration)?;
    let probe = fit_probe(&train_x, &calibration.labels, calibration.classes, &proto.probe)?;
    let test_x = encoder_features(proto, encoder, test)?;
    Ok(probe.accuracy(&test_x, &test.labels))
}

fn aggregate(proto: &Protocol, clients: &[ClientState], selected: &[usize], updates: Vec<ModelParams>, sizes: Vec<usize>) -> Result<(ModelParams, Vec<f64>)> {
    let freq: Vec<u64> = selected.iter().map(|&i| clients[i].frequency).collect();
    let weights = aggregation_weights(&sizes, &freq, proto.fed.beta, proto.fed.aggregation)?;
    let triples: Vec<(ModelParams, usize, u64)> = updates.into_iter().zip(sizes).zip(freq).map(|((u, n), f)| (u, n, f)).collect();
    let global = aggregate_selffed(&triples, proto.fed.beta, proto.fed.aggregation)?;
    Ok((global, weights))
}

/// Federated masked auto-encoder pre-training.
pub fn run_phase1(proto: &Protocol, server: &mut ServerState, clients: &mut [ClientState], data: &FedData) -> Result<Vec<RoundReport>> {
    proto.fed.validate()?;
    let rounds = proto.fed.rounds_phase1;
    let mut reports = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let start = Instant::now();
        let selected = select_clients(&proto.fed, clients, &mut proto.rng(&[1, round as u64, TAG_SELECT]));
        let global = server.autoencoder();
        let shared: &[ClientState] = clients;
        let outcomes = run_clients(proto, &selected, |i| {
            let c = &shared[i];
            let mut rng = ChaCha8Rng::seed_from_u64(client_seed(proto.seed, 1, round, c.id));
            local_pretrain(proto, c, &global, &data.train, c.frequency as usize - 1, &mut rng)
        })?;
        let client_losses: Vec<f64> = outcomes.iter().map(|o| mean(&o.losses)).collect();
        let sizes = selected.iter().map(|&i| clients[i].unlabeled.len()).collect();
        let (merged, weights) = aggregate(proto, clients, &selected, outcomes.into_iter().map(|o| o.weights).collect(), sizes)?;
        server.twins.set_online_encoder(&merged.section("enc."))?;
        server.decoder = merged.section("dec.");
        server.twins.ema_update()?;
        let global = server.autoencoder();
        for c in clients.iter_mut() {
            c.weights = global.clone();
        }
        let eval_loss = if is_eval_round(&proto.fed, round, rounds) && proto.fed.eval_samples > 0 {
            Some(eval_reconstruction(proto, &global, &data.test)?)
        } else {
            None
        };
        save_checkpoint(proto, 1, round, &global)?;
        reports.push(RoundReport {
            round,
            phase: 1,
            selected,
            client_losses,
            weight_sum: weights.iter().sum(),
            weights,
            test_accuracy: None,
            eval_loss,
            server_loss: None,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(reports)
}

fn server_views(proto: &Protocol, server: &ServerState, pool: &Dataset, rng: &mut ChaCha8Rng) -> Result<Vec<ViewPair>> {
    let k = proto.fed.server_batch.min(pool.len());
    let picks = index::sample(rng, pool.len(), k).into_vec();
    let raw: Vec<&Tensor> = picks.iter().map(|&i| &pool.images[i]).collect();
    let sources = match proto.fed.view_source {
        ViewSource::RawInput => raw.into_iter().cloned().collect(),
        ViewSource::DecoderOutput => reconstruct(&proto.model, &server.autoencoder(), &raw, proto.mask_ratio, rng)?,
    };
    sources
        .iter()
        .zip(&picks)
        .map(|(s, &i)| Ok(make_views(s, &proto.finetune_aug, rng, pool.ids[i])?))
        .collect()
}

/// Federated supervised fine-tuning with optional server-side contrastive
/// steps.
pub fn run_phase2(proto: &Protocol, server: &mut ServerState, clients: &mut [ClientState], data: &FedData) -> Result<Vec<RoundReport>> {
    proto.fed.validate()?;
    if let Some(c) = clients.iter().find(|c| c.labeled.is_empty()) {
        return Err(FedError::EmptyLabeledShard(c.id));
    }
    let rounds = proto.fed.rounds_phase2;
    let contrastive_on = proto.fed.contrastive_every > 0 && !data.server_pool.is_empty();
    let mut reports = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let start = Instant::now();
        let selected = select_clients(&proto.fed, clients, &mut proto.rng(&[2, round as u64, TAG_SELECT]));
        let global = server.twins.online_encoder();
        let shared: &[ClientState] = clients;
        let outcomes = run_clients(proto, &selected, |i| {
            let c = &shared[i];
            let mut rng = ChaCha8Rng::seed_from_u64(client_seed(proto.seed, 2, round, c.id));
            local_finetune(proto, c, &global, &data.train, &mut rng)
        })?;
        let client_losses: Vec<f64> = outcomes.iter().map(|o| mean(&o.losses)).collect();
        let sizes = selected.iter().map(|&i| clients[i].labeled.len()).collect();
        let mut encoders = Vec::with_capacity(outcomes.len());
        for (&i, o) in selected.iter().zip(outcomes) {
            clients[i].classifier = Some(o.classifier);
            encoders.push(o.encoder);
        }
        let (merged, weights) = aggregate(proto, clients, &selected, encoders, sizes)?;
        server.twins.set_online_encoder(&merged)?;

        let server_loss = if contrastive_on && round % proto.fed.contrastive_every == 0 {
            let mut rng = proto.rng(&[2, round as u64, TAG_SERVER]);
            if !server.queue_warm {
                let n = proto.contrastive.queue_capacity.min(data.server_pool.len());
                let imgs: Vec<&Tensor> = data.server_pool.images.iter().take(n).collect();
                for chunk in imgs.chunks(proto.fed.batch_size) {
                    warm_fill(&proto.model, &server.twins, &mut server.queue, chunk)?;
                }
                server.queue_warm = true;
            }
            let views = server_views(proto, server, &data.server_pool, &mut rng)?;
            Some(server_contrastive_step(
                &proto.model,
                &mut server.twins,
                &views,
                &mut server.queue,
                &proto.contrastive,
                &mut server.optimizer,
                proto.fed.lr_server,
            )?)
        } else {
            server.twins.ema_update()?;
            None
        };

        let global = server.twins.online_encoder();
        for c in clients.iter_mut() {
            c.weights = global.clone();
        }
        let test_accuracy = if is_eval_round(&proto.fed, round, rounds) {
            Some(probe_accuracy(proto, &global, &data.calibration, &data.test)?)
        } else {
            None
        };
        let mut snapshot = server.twins.online.clone();
        snapshot.merge(&server.twins.predictor);
        save_checkpoint(proto, 2, round, &snapshot)?;
        reports.push(RoundReport {
            round,
            phase: 2,
            selected,
            client_losses,
            weight_sum: weights.iter().sum(),
            weights,
            test_accuracy,
            eval_loss: None,
            server_loss,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(reports)
}
