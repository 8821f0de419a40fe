use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{invalid, DataSource, ExperimentConfig, Result};
use crate::datalab::{dirichlet_partition, load_folder, split_train_test, subsample_labels, synth_dataset, Dataset, PartitionPlan, Split};
use crate::federation::{check_disjoint, derive_seed, ClientState, FedData};

const TAG_DATA: u64 = 10;
const TAG_PARTITION: u64 = 11;
const TAG_LABELS: u64 = 12;

/// Redraws allowed when a partition leaves a client without samples.
const PARTITION_ATTEMPTS: usize = 100;

/// Assembled inputs of a run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub data: FedData,
    pub plan: PartitionPlan,
    pub clients: Vec<ClientState>,
}

/// Loads or synthesizes the dataset and carves out the test, calibration
/// and server-pool splits.
pub fn build_data(cfg: &ExperimentConfig) -> Result<FedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed(), &[TAG_DATA]));
    let full = match &cfg.data {
        DataSource::Synthetic(spec) => synth_dataset(spec, &mut rng),
        DataSource::Folder { root, manifest } => {
            let a = &cfg.arch;
            load_folder(root, manifest, [a.image_side, a.image_side, a.channels], a.num_classes)?
        }
    };
    if full.is_empty() {
        return Err(invalid("data", "the dataset is empty"));
    }
    let (train, held) = split_train_test(&full, cfg.test_fraction, &mut rng);
    let (mut calibration, test) = split_train_test(&held, 1.0 - cfg.calibration_fraction, &mut rng);
    calibration.split = Split::Test;
    let (train, server_pool) = if cfg.server_pool_fraction > 0.0 {
        split_train_test(&train, cfg.server_pool_fraction, &mut rng)
    } else {
        (train, Dataset::empty(full.classes, Split::Train))
    };
    if calibration.is_empty() || test.is_empty() {
        return Err(invalid("test_fraction", "held-out split too small for a calibration and a test set"));
    }
    Ok(FedData { train, test, calibration, server_pool })
}

/// Dirichlet label-skew shards and their labeled subsets. The whole shard is
/// the unlabeled set; the labeled subset is drawn from it.
pub fn build_clients(cfg: &ExperimentConfig, train: &Dataset) -> Result<(PartitionPlan, Vec<ClientState>)> {
    let m = cfg.federation.clients;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed(), &[TAG_PARTITION]));
    let mut plan = None;
    for _ in 0..PARTITION_ATTEMPTS {
        let p = dirichlet_partition(train, m, cfg.delta, None, &mut rng)?;
        if p.assignment.iter().all(|a| !a.is_empty()) {
            plan = Some(p);
            break;
        }
    }
    let plan = plan.ok_or_else(|| invalid("delta", format!("no partition with {m} non-empty clients in {PARTITION_ATTEMPTS} draws")))?;
    check_disjoint(&plan.assignment)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed(), &[TAG_LABELS]));
    let clients = plan
        .assignment
        .iter()
        .enumerate()
        .map(|(id, ids)| {
            let shard = train.positions_of(ids);
            let labeled = if cfg.label_fraction > 0.0 { subsample_labels(&shard, &train.labels, cfg.label_fraction, &mut rng)?.0 } else { vec![] };
            Ok(ClientState::new(id, shard, labeled))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((plan, clients))
}

impl Experiment {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let data = build_data(cfg)?;
        let (plan, clients) = build_clients(cfg, &data.train)?;
        Ok(Self { data, plan, clients })
    }
}
