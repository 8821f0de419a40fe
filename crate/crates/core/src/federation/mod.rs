//! Clients, server, client selection, both protocol phases and the
//! aggregation rules.

mod aggregate;
mod local;
mod probe;
mod protocol;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contrastive::{ContrastiveError, ViewSource};
use crate::microtensor::{CodecError, ModelParams, OptimizerKind, TensorError};
use crate::patching::PatchError;
use crate::ssl_losses::LossError;
use crate::swinlite::ModelError;

pub use aggregate::{aggregate_fedavg, aggregate_selffed, aggregation_weights, apply_weights, weight_normalizer};
pub use local::{local_finetune, local_pretrain, FinetuneOutcome, PretrainOutcome};
pub use probe::{fit_probe, LinearProbe, ProbeConfig};
pub use protocol::{
    checkpoint_name, client_seed, encoder_features, eval_reconstruction, probe_accuracy, run_phase1, run_phase2, FedData, Protocol, RoundReport,
    ServerState,
};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("no updates to aggregate")]
    EmptyUpdateSet,
    #[error("beta {0} outside (0, 1]")]
    BetaOutOfRange(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("client {0} has no unlabeled samples")]
    EmptyShard(usize),
    #[error("client {0} has no labeled samples")]
    EmptyLabeledShard(usize),
    #[error("client {0} produced a non-finite loss")]
    NonFinite(usize),
    #[error("invalid federation setting `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("sample {0} is assigned to more than one client")]
    OverlappingShards(u64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FedError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    Fedavg,
    /// `Σ (n_t/n)·β^F_t·ϖ_t` with no normalizer.
    SelffedLiteral,
    /// The literal weights divided by their sum.
    #[default]
    SelffedNormalized,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum SelectionSchedule {
    /// Uniform subset without replacement.
    #[default]
    Uniform,
    /// Successive draws without replacement, each proportional to the
    /// remaining clients' weights.
    Skewed { weights: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    /// M
    pub clients: usize,
    pub clients_per_round: usize,
    pub rounds_phase1: usize,
    pub rounds_phase2: usize,
    /// β
    pub beta: f64,
    pub aggregation: AggregationMode,
    pub schedule: SelectionSchedule,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// η for local pre-training.
    pub lr_pretrain: f64,
    /// η for local fine-tuning.
    pub lr_finetune: f64,
    /// Learning rate of the server contrastive step.
    pub lr_server: f64,
    /// Linear warmup length in local epochs, phase 1 only.
    pub warmup_epochs: usize,
    /// Run the server contrastive step every this many phase-2 rounds
    /// (0 disables it).
    pub contrastive_every: usize,
    /// Views per server contrastive step.
    pub server_batch: usize,
    pub view_source: ViewSource,
    /// Test images used for the reconstruction loss in phase-1 reports.
    pub eval_samples: usize,
    /// Probe accuracy is measured every this many phase-2 rounds and after
    /// the last one.
    pub eval_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 5,
            clients_per_round: 5,
            rounds_phase1: 200,
            rounds_phase2: 100,
            beta: 0.95,
            aggregation: AggregationMode::SelffedNormalized,
            schedule: SelectionSchedule::Uniform,
            local_epochs: 1,
            batch_size: 32,
            optimizer: OptimizerKind::Adamw,
            lr_pretrain: 1e-3,
            lr_finetune: 1e-3,
            lr_server: 1e-3,
            warmup_epochs: 5,
            contrastive_every: 1,
            server_batch: 16,
            view_source: ViewSource::DecoderOutput,
            eval_samples: 64,
            eval_every: 10,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| Err(FedError::Config { field, reason });
        if self.clients == 0 {
            return bad("clients", "need at least one client".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.clients {
            return bad("clients_per_round", format!("must be in 1..={}", self.clients));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta", format!("{} outside (0, 1]", self.beta));
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        for (field, v) in [("lr_pretrain", self.lr_pretrain), ("lr_finetune", self.lr_finetune), ("lr_server", self.lr_server)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, format!("{v} is not a finite non-negative rate"));
            }
        }
        if self.server_batch == 0 {
            return bad("server_batch", "must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be positive".into());
        }
        if let SelectionSchedule::Skewed { weights } = &self.schedule {
            if weights.len() != self.clients || weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
                return bad("schedule", format!("need {} positive weights", self.clients));
            }
        }
        Ok(())
    }
}

/// One participant. Shards are positions into the shared training set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// Every sample of the shard; labels are never read from it.
    pub unlabeled: Vec<usize>,
    /// The labeled subset.
    pub labeled: Vec<usize>,
    /// Local weights from the last broadcast or local update.
    pub weights: ModelParams,
    /// Private classifier head, created at the first fine-tuning round.
    pub classifier: Option<ModelParams>,
    /// F: rounds in which this client's update was aggregated.
    pub frequency: u64,
}

impl ClientState {
    pub fn new(id: usize, unlabeled: Vec<usize>, labeled: Vec<usize>) -> Self {
        Self { id, unlabeled, labeled, weights: ModelParams::new(), classifier: None, frequency: 0 }
    }
}

/// Fails if any sample id sits in two shards.
pub fn check_disjoint(shards: &[Vec<u64>]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for shard in shards {
        for &id in shard {
            if !seen.insert(id) {
                return Err(FedError::OverlappingShards(id));
            }
        }
    }
    Ok(())
}

/// Picks this round's participants (sorted by id) and increments their
/// frequency counters.
pub fn select_clients<R: Rng + ?Sized>(cfg: &FederationConfig, clients: &mut [ClientState], rng: &mut R) -> Vec<usize> {
    let m = clients.len();
    let k = cfg.clients_per_round.min(m);
    let mut chosen: Vec<usize> = match &cfg.schedule {
        _ if k == m => (0..m).collect(),
        SelectionSchedule::Uniform => rand::seq::index::sample(rng, m, k).into_vec(),
        SelectionSchedule::Skewed { weights } => {
            let mut remaining: Vec<usize> = (0..m).collect();
            let mut out = Vec::with_capacity(k);
            for _ in 0..k {
                let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = remaining.len() - 1;
                for (pos, &i) in remaining.iter().enumerate() {
                    if u < weights[i] {
                        pick = pos;
                        break;
                    }
                    u -= weights[i];
                }
                out.push(remaining.remove(pick));
            }
            out
        }
    };
    chosen.sort_unstable();
    for &i in &chosen {
        clients[i].frequency += 1;
    }
    chosen
}

/// SplitMix64 mixing of a base seed with a sequence of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut x = seed;
    for &t in tags {
        x ^= t.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}
