use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{invalid, Experiment, ExperimentConfig, MetricsSink, Result, RunMode, RunSummary};
use crate::federation::{run_phase1, run_phase2, Protocol, ServerState};
use crate::microtensor::ModelParams;
use crate::swinlite::SwinLite;

/// The β values of the sensitivity study.
pub const BETA_SWEEP: [f64; 7] = [0.6, 0.75, 0.9, 0.95, 0.99, 0.999, 1.0];

fn protocol(cfg: &ExperimentConfig) -> Result<Protocol> {
    let model = SwinLite::new(cfg.arch.clone()).map_err(|e| invalid("arch", e.to_string()))?;
    let mut fed = cfg.federation.clone();
    if cfg.mode == RunMode::ScratchBaseline {
        fed.contrastive_every = 0;
    }
    let mut p = Protocol::new(model, fed, cfg.seed());
    p.contrastive = cfg.contrastive.clone();
    p.pretrain_aug = cfg.pretrain_aug();
    p.finetune_aug = cfg.finetune_aug();
    p.mask_ratio = cfg.mask_ratio;
    p.probe = cfg.probe;
    p.workers = cfg.workers;
    p.checkpoint_dir = cfg.checkpoints.then(|| cfg.output_dir.join("checkpoints"));
    Ok(p)
}

/// Runs the configured phases and writes `rounds.csv`, `summary.json`,
/// `config.toml` and the checkpoints under `output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let proto = protocol(cfg)?;
    let Experiment { data, plan, mut clients } = Experiment::build(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml())?;
    plan.write_manifest(cfg.output_dir.join("partition.json"))?;
    let mut server = ServerState::new(&proto);
    if cfg.mode == RunMode::FinetuneOnly {
        let path = cfg.init_checkpoint.as_ref().expect("validated");
        let init = ModelParams::load(path)?;
        server.twins.set_online_encoder(&init.section("enc.")).map_err(|e| invalid("init_checkpoint", e.to_string()))?;
        let dec = init.section("dec.");
        if !dec.is_empty() {
            server.decoder = dec;
        }
    }
    let mut sink = MetricsSink::create(&cfg.output_dir)?;
    let mut reports = vec![];
    if matches!(cfg.mode, RunMode::Full | RunMode::PretrainOnly) {
        reports.extend(run_phase1(&proto, &mut server, &mut clients, &data)?);
    }
    if cfg.mode != RunMode::PretrainOnly {
        reports.extend(run_phase2(&proto, &mut server, &mut clients, &data)?);
    }
    for r in &reports {
        sink.record(r)?;
    }
    let summary = RunSummary::new(cfg, &reports);
    sink.finish(&summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    Beta,
    Delta,
    LabelFraction,
    Seed,
}

impl std::str::FromStr for SweepParam {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "beta" => Ok(Self::Beta),
            "delta" => Ok(Self::Delta),
            "label_fraction" | "label-fraction" => Ok(Self::LabelFraction),
            "seed" => Ok(Self::Seed),
            _ => Err(format!("unknown sweep parameter `{s}` (beta, delta, label_fraction, seed)")),
        }
    }
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            Self::Beta => "beta",
            Self::Delta => "delta",
            Self::LabelFraction => "label_fraction",
            Self::Seed => "seed",
        }
    }
}

/// Default values for a sweep parameter, where the study defines them.
pub fn sweep_values(param: SweepParam) -> Option<Vec<f64>> {
    match param {
        SweepParam::Beta => Some(BETA_SWEEP.to_vec()),
        _ => None,
    }
}

/// One run per value, each under `output_dir/<param>_<value>`, plus a
/// `sweep.csv` with one row per run.
pub fn sweep(base: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<RunSummary>> {
    if values.is_empty() {
        return Err(invalid("values", "nothing to sweep"));
    }
    std::fs::create_dir_all(&base.output_dir)?;
    let mut table = csv::Writer::from_path(base.output_dir.join("sweep.csv"))?;
    table.write_record([param.name(), "run_id", "final_accuracy", "best_accuracy", "final_eval_loss"])?;
    let mut out = vec![];
    for &v in values {
        let mut cfg = base.clone();
        match param {
            SweepParam::Beta => cfg.federation.beta = v,
            SweepParam::Delta => cfg.delta = v,
            SweepParam::LabelFraction => cfg.label_fraction = v,
            SweepParam::Seed => {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(invalid("values", format!("seed {v} is not a non-negative integer")));
                }
                cfg.seed = Some(v as u64);
            }
        }
        cfg.output_dir = base.output_dir.join(PathBuf::from(format!("{}_{v}", param.name())));
        let s = run_experiment(&cfg)?;
        let o = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        table.write_record([v.to_string(), s.run_id.clone(), o(s.final_accuracy), o(s.best_accuracy), o(s.final_eval_loss)])?;
        out.push(s);
    }
    table.flush()?;
    Ok(out)
}
