//! Experiment configuration, data assembly, run orchestration and metrics
//! export.
//!
//! Configs are TOML. Scalars sit at the top level and every sub-config has
//! its own table (`[arch]`, `[federation]`, `[contrastive]`, `[probe]`,
//! `[augment.pretrain]`, `[augment.finetune]`, `[data]`). Only `seed` is
//! required; unknown and duplicate keys are rejected.

mod data;
mod metrics;
mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datalab::{DataError, SynthSpec};
use crate::federation::{FedError, FederationConfig, ProbeConfig};
use crate::microtensor::CodecError;
use crate::patching::{AugmentSpec, Phase};
use crate::ssl_losses::ContrastiveConfig;
use crate::swinlite::ArchConfig;

pub use data::{build_clients, build_data, Experiment};
pub use metrics::{compare_runs, read_summary, Comparison, ComparisonRow, MetricsSink, RunSummary, CSV_HEADER, SCHEMA_VERSION};
pub use run::{run_experiment, sweep, sweep_values, SweepParam};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config field `{field}`: {reason}")]
    Validation { field: String, reason: String },
    #[error("runs cannot be compared: {0}")]
    IncompatibleRuns(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Short machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Parse(_) => "parse",
            Self::Validation { .. } => "validation",
            Self::IncompatibleRuns(_) => "incompatible-runs",
            Self::Data(_) => "data",
            Self::Fed(_) => "federation",
            Self::Codec(_) => "checkpoint",
            Self::Io(_) => "io",
            Self::Csv(_) => "csv",
            Self::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> HarnessError {
    HarnessError::Validation { field: field.into(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Phase 1 then phase 2.
    #[default]
    Full,
    PretrainOnly,
    /// Phase 2 starting from `init_checkpoint`.
    FinetuneOnly,
    /// Phase 2 from random weights with the server contrastive step off.
    ScratchBaseline,
}

impl RunMode {
    pub fn method(self) -> &'static str {
        match self {
            Self::Full => "selffed",
            Self::PretrainOnly => "pretrain-only",
            Self::FinetuneOnly => "finetune-only",
            Self::ScratchBaseline => "scratch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthSpec),
    /// PGM/PPM files listed in a `path,label` manifest under `root`.
    Folder { root: PathBuf, manifest: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic(SynthSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Defaults to the standard recipe for the configured image side.
    pub pretrain: Option<AugmentSpec>,
    pub finetune: Option<AugmentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub mode: RunMode,
    pub output_dir: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
    /// ψ
    pub mask_ratio: f64,
    /// Dirichlet concentration δ.
    pub delta: f64,
    pub label_fraction: f64,
    pub test_fraction: f64,
    /// Share of the held-out split used to fit the evaluation probe.
    pub calibration_fraction: f64,
    /// Share of the training split kept by the server as its unlabeled pool.
    pub server_pool_fraction: f64,
    pub workers: usize,
    pub checkpoints: bool,
    pub arch: ArchConfig,
    pub federation: FederationConfig,
    pub contrastive: ContrastiveConfig,
    pub augment: AugmentConfig,
    pub probe: ProbeConfig,
    pub data: DataSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            mode: RunMode::Full,
            output_dir: PathBuf::from("runs/selffed"),
            init_checkpoint: None,
            mask_ratio: 0.6,
            delta: 0.5,
            label_fraction: 0.1,
            test_fraction: 0.2,
            calibration_fraction: 0.5,
            server_pool_fraction: 0.1,
            workers: 1,
            checkpoints: true,
            arch: ArchConfig::default(),
            federation: FederationConfig::default(),
            contrastive: ContrastiveConfig::default(),
            augment: AugmentConfig::default(),
            probe: ProbeConfig::default(),
            data: DataSource::default(),
        }
    }
}

fn unit_open(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("{v} outside (0, 1)")))
    }
}

impl ExperimentConfig {
    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn pretrain_aug(&self) -> AugmentSpec {
        self.augment.pretrain.clone().unwrap_or_else(|| AugmentSpec::pretrain_default(self.arch.image_side))
    }

    pub fn finetune_aug(&self) -> AugmentSpec {
        self.augment.finetune.clone().unwrap_or_else(|| AugmentSpec::finetune_default(self.arch.image_side))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(invalid("seed", "a seed is required"));
        }
        self.arch.validate().map_err(|e| invalid("arch", e.to_string()))?;
        self.federation.validate().map_err(|e| match e {
            FedError::Config { field, reason } => invalid(format!("federation.{field}"), reason),
            other => invalid("federation", other.to_string()),
        })?;
        if let Some(f) = self.contrastive.invalid_field() {
            return Err(invalid(format!("contrastive.{f}"), "out of range"));
        }
        let r = self.arch.grid_side().pow(2);
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) || crate::patching::masked_count(r, self.mask_ratio) == 0 {
            return Err(invalid("mask_ratio", format!("{} must mask at least one of {r} patches and keep one", self.mask_ratio)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(invalid("delta", format!("{} is not positive", self.delta)));
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return Err(invalid("label_fraction", format!("{} outside [0, 1]", self.label_fraction)));
        }
        unit_open("test_fraction", self.test_fraction)?;
        unit_open("calibration_fraction", self.calibration_fraction)?;
        if !(0.0..1.0).contains(&self.server_pool_fraction) {
            return Err(invalid("server_pool_fraction", format!("{} outside [0, 1)", self.server_pool_fraction)));
        }
        if self.workers == 0 {
            return Err(invalid("workers", "must be positive"));
        }
        if !(self.probe.lr > 0.0 && self.probe.l2 >= 0.0) {
            return Err(invalid("probe", "lr must be positive and l2 non-negative"));
        }
        for (name, spec, phase) in [("augment.pretrain", self.pretrain_aug(), Phase::Pretrain), ("augment.finetune", self.finetune_aug(), Phase::Finetune)] {
            spec.validate().map_err(|e| invalid(name, e.to_string()))?;
            if spec.phase != phase || spec.crop_size != self.arch.image_side {
                return Err(invalid(name, format!("needs phase {phase:?} and crop_size {}", self.arch.image_side)));
            }
        }
        if self.mode == RunMode::FinetuneOnly && self.init_checkpoint.is_none() {
            return Err(invalid("init_checkpoint", "finetune-only needs a phase-1 checkpoint"));
        }
        if let DataSource::Synthetic(s) = &self.data {
            if s.side != self.arch.image_side || s.channels != self.arch.channels || s.classes != self.arch.num_classes {
                return Err(invalid("data", "synthetic side, channels and classes must match [arch]"));
            }
            if s.per_class == 0 {
                return Err(invalid("data.per_class", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Parse(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}
