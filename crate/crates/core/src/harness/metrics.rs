use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExperimentConfig, HarnessError, Result};
use crate::federation::RoundReport;

pub const SCHEMA_VERSION: u32 = 1;

/// Column order of the per-round CSV. `wall_ms` is the only timing column.
pub const CSV_HEADER: [&str; 10] =
    ["phase", "round", "selected", "client_losses", "weights", "weight_sum", "test_accuracy", "eval_loss", "server_loss", "wall_ms"];

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-round CSV writer; the summary is written once by `finish`.
pub struct MetricsSink {
    writer: csv::Writer<File>,
    dir: PathBuf,
    rows: usize,
}

impl MetricsSink {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut writer = csv::Writer::from_path(dir.join("rounds.csv"))?;
        writer.write_record(CSV_HEADER)?;
        Ok(Self { writer, dir: dir.to_path_buf(), rows: 0 })
    }

    pub fn record(&mut self, r: &RoundReport) -> Result<()> {
        self.writer.write_record([
            r.phase.to_string(),
            r.round.to_string(),
            join(&r.selected),
            join(&r.client_losses),
            join(&r.weights),
            r.weight_sum.to_string(),
            opt(r.test_accuracy),
            opt(r.eval_loss),
            opt(r.server_loss),
            r.wall_ms.to_string(),
        ])?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(mut self, summary: &RunSummary) -> Result<PathBuf> {
        self.writer.flush()?;
        let path = self.dir.join("summary.json");
        let mut f = File::create(&path)?;
        serde_json::to_writer_pretty(&mut f, summary)?;
        f.write_all(b"\n")?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    /// First 12 hex digits of the SHA-256 of the config echo.
    pub run_id: String,
    pub method: String,
    /// Fingerprint of the data source and splits; runs are comparable only
    /// when it matches.
    pub dataset: String,
    pub seed: u64,
    pub delta: f64,
    pub label_fraction: f64,
    pub beta: f64,
    pub rounds_phase1: usize,
    pub rounds_phase2: usize,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub final_eval_loss: Option<f64>,
    pub config: ExperimentConfig,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunSummary {
    pub fn new(cfg: &ExperimentConfig, reports: &[RoundReport]) -> Self {
        let echo = serde_json::to_vec(cfg).expect("config serializes");
        let data_key = serde_json::to_vec(&(&cfg.data, cfg.test_fraction, cfg.calibration_fraction, cfg.server_pool_fraction)).expect("serializes");
        let accs: Vec<f64> = reports.iter().filter_map(|r| r.test_accuracy).collect();
        Self {
            schema_version: SCHEMA_VERSION,
            run_id: hex_digest(&echo)[..12].to_string(),
            method: cfg.mode.method().to_string(),
            dataset: hex_digest(&data_key)[..12].to_string(),
            seed: cfg.seed(),
            delta: cfg.delta,
            label_fraction: cfg.label_fraction,
            beta: cfg.federation.beta,
            rounds_phase1: reports.iter().filter(|r| r.phase == 1).count(),
            rounds_phase2: reports.iter().filter(|r| r.phase == 2).count(),
            final_accuracy: accs.last().copied(),
            best_accuracy: accs.iter().copied().reduce(f64::max),
            final_eval_loss: reports.iter().filter_map(|r| r.eval_loss).next_back(),
            config: cfg.clone(),
        }
    }
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let s: RunSummary = serde_json::from_reader(File::open(path)?)?;
    if s.schema_version != SCHEMA_VERSION {
        return Err(HarnessError::Parse(format!("{}: schema version {} (expected {SCHEMA_VERSION})", path.display(), s.schema_version)));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    pub delta: f64,
    pub label_fraction: f64,
    pub beta: f64,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    /// Arithmetic mean over seeds.
    pub mean_accuracy: f64,
    /// Mean accuracy minus that of the first row.
    pub delta_vs_first: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub dataset: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<14} {:>8} {:>8} {:>7} {:>6} {:>10} {:>10}\n", "method", "delta", "labels", "beta", "seeds", "accuracy", "vs_first");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:>8} {:>8} {:>7} {:>6} {:>10.4} {:>+10.4}\n",
                r.method,
                r.delta,
                r.label_fraction,
                r.beta,
                r.seeds.len(),
                r.mean_accuracy,
                r.delta_vs_first
            ));
        }
        out
    }
}

/// Groups summaries by (method, δ, label fraction, β) in first-seen order
/// and reports mean final accuracy per group.
pub fn compare_runs(summaries: &[RunSummary]) -> Result<Comparison> {
    if summaries.len() < 2 {
        return Err(HarnessError::IncompatibleRuns("need at least two summaries".into()));
    }
    let dataset = summaries[0].dataset.clone();
    if let Some(odd) = summaries.iter().find(|s| s.dataset != dataset) {
        return Err(HarnessError::IncompatibleRuns(format!("run {} uses dataset {}, run {} uses {}", summaries[0].run_id, dataset, odd.run_id, odd.dataset)));
    }
    let mut order: Vec<String> = vec![];
    let mut groups: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        let key = format!("{}|{}|{}|{}", s.method, s.delta, s.label_fraction, s.beta);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(s);
    }
    let mut rows: Vec<ComparisonRow> = order
        .iter()
        .map(|k| {
            let g = &groups[k];
            let accuracies: Vec<f64> = g.iter().map(|s| s.final_accuracy.unwrap_or(f64::NAN)).collect();
            ComparisonRow {
                method: g[0].method.clone(),
                delta: g[0].delta,
                label_fraction: g[0].label_fraction,
                beta: g[0].beta,
                seeds: g.iter().map(|s| s.seed).collect(),
                mean_accuracy: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
                accuracies,
                delta_vs_first: 0.0,
            }
        })
        .collect();
    let base = rows[0].mean_accuracy;
    for r in &mut rows {
        r.delta_vs_first = r.mean_accuracy - base;
    }
    Ok(Comparison { dataset, rows })
}
