use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use selffed::datalab::heterogeneity_score;
use selffed::harness::{
    build_clients, build_data, compare_runs, load_config, parse_config, read_summary, run_experiment, sweep, sweep_values, ExperimentConfig,
    HarnessError, SweepParam,
};

#[derive(Parser)]
#[command(name = "selffed", version, about = "Two-phase federated self-supervised learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        config: PathBuf,
        /// Parallel clients per round (overrides the config).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the experiment once per value of a parameter.
    Sweep {
        /// beta, delta, label_fraction or seed.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values; beta defaults to the study's list.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Tabulate accuracy across run summaries.
    Compare {
        #[arg(required = true, num_args = 1..)]
        summaries: Vec<PathBuf>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Write a Dirichlet partition manifest for the configured dataset.
    Partition {
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        clients: usize,
        #[arg(long)]
        manifest_out: PathBuf,
        /// Dataset config; the default synthetic set otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn with_workers(mut cfg: ExperimentConfig, workers: Option<usize>) -> Result<ExperimentConfig, HarnessError> {
    if let Some(w) = workers {
        cfg.workers = w;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, workers } => {
            let cfg = with_workers(load_config(&config)?, workers)?;
            let s = run_experiment(&cfg)?;
            let acc = s.final_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
            println!("run {} ({}) accuracy {acc} -> {}", s.run_id, s.method, cfg.output_dir.display());
        }
        Command::Sweep { param, values, config, workers } => {
            let cfg = with_workers(load_config(&config)?, workers)?;
            let values = if values.is_empty() {
                sweep_values(param).ok_or_else(|| HarnessError::Validation { field: "values".into(), reason: "no default values for this parameter".into() })?
            } else {
                values
            };
            for s in sweep(&cfg, param, &values)? {
                let acc = s.final_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
                println!("{} beta={} delta={} labels={} accuracy {acc}", s.run_id, s.beta, s.delta, s.label_fraction);
            }
        }
        Command::Compare { summaries, json } => {
            let runs = summaries.iter().map(|p| read_summary(p)).collect::<Result<Vec<_>, _>>()?;
            let table = compare_runs(&runs)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&table)?);
            } else {
                print!("{}", table.to_table());
            }
        }
        Command::Partition { delta, clients, manifest_out, config, seed } => {
            let mut cfg = match config {
                Some(p) => load_config(&p)?,
                None => parse_config(&format!("seed = {seed}\n"))?,
            };
            cfg.delta = delta;
            cfg.federation.clients = clients;
            cfg.federation.clients_per_round = cfg.federation.clients_per_round.min(clients.max(1));
            cfg.validate()?;
            let data = build_data(&cfg)?;
            let (plan, _) = build_clients(&cfg, &data.train)?;
            plan.write_manifest(&manifest_out)?;
            let h = heterogeneity_score(&plan);
            let sizes: Vec<usize> = plan.assignment.iter().map(|a| a.len()).collect();
            println!("shards {sizes:?} entropy {:.4} max_tv {:.4} -> {}", h.mean_entropy, h.max_tv, manifest_out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
