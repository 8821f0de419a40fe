use std::fs;
use std::path::Path;

use selffed::harness::*;

fn tiny(seed: u64, out: &Path) -> String {
    format!(
        r#"
seed = {seed}
output_dir = "{}"
label_fraction = 0.5

[federation]
clients = 2
clients_per_round = 2
rounds_phase1 = 2
rounds_phase2 = 2
batch_size = 16
eval_samples = 8
eval_every = 1
server_batch = 4

[contrastive]
queue_capacity = 16

[data]
kind = "synthetic"
per_class = 20
"#,
        out.display()
    )
}

fn strip_timing(csv: &str) -> String {
    csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head)).collect::<Vec<_>>().join("\n")
}

#[test]
fn seed_only_config_gets_defaults() {
    let cfg = parse_config("seed = 3\n").unwrap();
    assert_eq!(cfg.seed, Some(3));
    assert_eq!(cfg.mask_ratio, 0.6);
    assert_eq!(cfg.federation.beta, 0.95);
    assert_eq!(cfg.contrastive.target_decay, 0.99);
    assert_eq!(cfg.contrastive.temperature, 0.2);
    assert_eq!(cfg.federation.clients, 5);
    assert_eq!(cfg.federation.rounds_phase1, 200);
    assert_eq!(cfg.federation.rounds_phase2, 100);
    assert_eq!(cfg.federation.warmup_epochs, 5);
    assert_eq!(cfg.federation.batch_size, 32);
}

#[test]
fn bad_configs_are_rejected() {
    match parse_config("seed = 1\n[federation]\nbeta = 1.5\n") {
        Err(HarnessError::Validation { field, .. }) => assert_eq!(field, "federation.beta"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_config("seed = 1\nseed = 2\n"), Err(HarnessError::Parse(_))));
    assert!(matches!(parse_config("seed = 1\nbogus = 2\n"), Err(HarnessError::Parse(_))));
    assert!(matches!(parse_config("mask_ratio = 0.5\n"), Err(HarnessError::Validation { field, .. }) if field == "seed"));
    assert!(matches!(parse_config("seed = 1\nmode = \"finetune-only\"\n"), Err(HarnessError::Validation { field, .. }) if field == "init_checkpoint"));
    assert!(matches!(parse_config("seed = 1\nmask_ratio = 0.001\n"), Err(HarnessError::Validation { field, .. }) if field == "mask_ratio"));
    assert!(matches!(
        parse_config("seed = 1\n[contrastive]\ntemperature = 0.0\n"),
        Err(HarnessError::Validation { field, .. }) if field == "contrastive.temperature"
    ));
    let missing = load_config(Path::new("/nonexistent/selffed.toml"));
    assert!(matches!(missing, Err(HarnessError::Parse(_))));
}

#[test]
fn config_echo_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&tiny(5, dir.path())).unwrap();
    let again = parse_config(&cfg.to_toml()).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn csv_header_covers_every_report_field() {
    let r = selffed::federation::RoundReport {
        round: 1,
        phase: 1,
        selected: vec![],
        client_losses: vec![],
        weights: vec![],
        weight_sum: 0.0,
        test_accuracy: None,
        eval_loss: None,
        server_loss: None,
        wall_ms: 0,
    };
    let json = serde_json::to_value(&r).unwrap();
    let mut fields: Vec<&str> = json.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    let mut header = CSV_HEADER.to_vec();
    fields.sort_unstable();
    header.sort_unstable();
    assert_eq!(fields, header);
}

#[test]
fn runs_are_reproducible_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, workers: usize| {
        let mut cfg = parse_config(&tiny(9, &dir.path().join(name))).unwrap();
        cfg.workers = workers;
        let s = run_experiment(&cfg).unwrap();
        (s, dir.path().join(name))
    };
    let (a, pa) = run("a", 1);
    let (b, pb) = run("b", 2);
    let csv_a = fs::read_to_string(pa.join("rounds.csv")).unwrap();
    assert_eq!(strip_timing(&csv_a), strip_timing(&fs::read_to_string(pb.join("rounds.csv")).unwrap()));
    assert_eq!(csv_a.lines().count(), 1 + 4);
    assert_eq!(csv_a.lines().next().unwrap(), CSV_HEADER.join(","));
    for phase in [1, 2] {
        for round in [1, 2] {
            let name = selffed::federation::checkpoint_name(phase, round);
            assert_eq!(fs::read(pa.join("checkpoints").join(&name)).unwrap(), fs::read(pb.join("checkpoints").join(&name)).unwrap());
        }
    }
    assert_eq!((a.rounds_phase1, a.rounds_phase2), (2, 2));
    assert_eq!(a.final_accuracy, b.final_accuracy);
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(read_summary(&pa.join("summary.json")).unwrap(), a);
    assert!(pa.join("partition.json").exists());
    let echoed = load_config(&pa.join("config.toml")).unwrap();
    assert_eq!(echoed, a.config);
}

#[test]
fn scratch_baseline_skips_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse_config(&tiny(2, dir.path())).unwrap();
    cfg.mode = RunMode::ScratchBaseline;
    let s = run_experiment(&cfg).unwrap();
    assert_eq!((s.rounds_phase1, s.rounds_phase2), (0, 2));
    let csv = fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("2,")));
    // The server contrastive step is off, so no server loss is logged.
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(8) == Some("")));
    assert_eq!(s.method, "scratch");
}

#[test]
fn finetune_only_resumes_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut pre = parse_config(&tiny(4, &dir.path().join("pre"))).unwrap();
    pre.mode = RunMode::PretrainOnly;
    let s = run_experiment(&pre).unwrap();
    assert_eq!((s.rounds_phase1, s.rounds_phase2), (2, 0));
    assert_eq!(s.final_accuracy, None);
    let mut fine = parse_config(&tiny(4, &dir.path().join("fine"))).unwrap();
    fine.mode = RunMode::FinetuneOnly;
    fine.init_checkpoint = Some(dir.path().join("pre/checkpoints/round_1_2.sfwt"));
    let s = run_experiment(&fine).unwrap();
    assert_eq!((s.rounds_phase1, s.rounds_phase2), (0, 2));
    fine.init_checkpoint = Some(dir.path().join("missing.sfwt"));
    assert!(run_experiment(&fine).is_err());
}

#[test]
fn zero_label_fraction_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse_config(&tiny(1, dir.path())).unwrap();
    cfg.label_fraction = 0.0;
    cfg.mode = RunMode::ScratchBaseline;
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(err.kind(), "federation");
    assert!(matches!(err, HarnessError::Fed(selffed::federation::FedError::EmptyLabeledShard(_))));
}

fn summary(method: &str, seed: u64, acc: f64, dataset: &str) -> RunSummary {
    let cfg = parse_config(&format!("seed = {seed}\n")).unwrap();
    let mut s = RunSummary::new(&cfg, &[]);
    s.method = method.into();
    s.final_accuracy = Some(acc);
    s.dataset = dataset.into();
    s
}

#[test]
fn comparisons() {
    let a = summary("selffed", 0, 0.85, "d");
    let same = compare_runs(&[a.clone(), a.clone()]).unwrap();
    assert!(same.rows.iter().all(|r| r.delta_vs_first == 0.0));
    let runs: Vec<RunSummary> = [0.7, 0.8, 0.9].iter().enumerate().map(|(i, &acc)| summary("scratch", i as u64, acc, "d")).chain([a.clone()]).collect();
    let table = compare_runs(&runs).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[0].seeds, vec![0, 1, 2]);
    assert_eq!(table.rows[0].mean_accuracy, (0.7 + 0.8 + 0.9) / 3.0);
    assert!((table.rows[1].delta_vs_first - 0.05).abs() < 1e-12);
    assert!(table.to_table().contains("scratch"));
    assert!(matches!(compare_runs(&[a.clone(), summary("selffed", 1, 0.5, "other")]), Err(HarnessError::IncompatibleRuns(_))));
    assert!(matches!(compare_runs(&[a]), Err(HarnessError::IncompatibleRuns(_))));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse_config(&tiny(6, dir.path())).unwrap();
    cfg.federation.rounds_phase1 = 1;
    cfg.federation.rounds_phase2 = 1;
    cfg.checkpoints = false;
    let out = sweep(&cfg, SweepParam::Beta, &[0.9, 1.0]).unwrap();
    assert_eq!(out.iter().map(|s| s.beta).collect::<Vec<_>>(), vec![0.9, 1.0]);
    let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(dir.path().join("beta_0.9/summary.json").exists());
    assert_eq!(sweep_values(SweepParam::Beta).unwrap(), vec![0.6, 0.75, 0.9, 0.95, 0.99, 0.999, 1.0]);
    assert!("gamma".parse::<SweepParam>().is_err());
}
