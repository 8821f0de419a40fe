//! Acceptance criteria, one verdict line each. Run with
//! `cargo test -p selffed --test acceptance -- --nocapture`.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selffed::contrastive::ema_update;
use selffed::datalab::{dirichlet_partition, heterogeneity_score, Dataset, Split, SynthSpec};
use selffed::federation::{
    aggregate_fedavg, aggregate_selffed, aggregation_weights, checkpoint_name, select_clients, AggregationMode, ClientState,
    FederationConfig, SelectionSchedule,
};
use selffed::harness::{run_experiment, sweep, sweep_values, DataSource, ExperimentConfig, RunMode, SweepParam};
use selffed::microtensor::{ModelParams, Tensor};
use selffed::patching::{masked_count, partition_patches, reassemble, sample_mask, PatchGrid};
use selffed::ssl_losses::{info_nce, masked_mse, InfoNceMode, MemoryQueue};

use common::model::{composite_gradcheck, toy_config};
use common::primitives::{run_trials, PRIMITIVES};

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &'static str, pass: bool, detail: String) -> Verdict {
    println!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Verdict { id, name, pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scalar(v: f64) -> ModelParams {
    let mut p = ModelParams::new();
    p.insert("w", Tensor::from_vec(vec![v]));
    p
}

fn unit(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn strip_timing(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()).collect()
}

fn gradient_fidelity() -> Verdict {
    let t = Instant::now();
    let trials = 100;
    let primitive = run_trials(2024, trials);
    let (worst_op, worst) = primitive.iter().copied().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let composite = composite_gradcheck(toy_config(), usize::MAX, 5);
    let secs = t.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && composite <= 1e-3 && secs < 60.0;
    report(
        1,
        "gradient fidelity",
        pass,
        format!(
            "{} primitives x {trials} trials worst {worst:.2e} ({worst_op}) tol 1e-4; 4-patch encoder-decoder worst {composite:.2e} tol 1e-3; {secs:.1}s of 60s",
            PRIMITIVES.len()
        ),
    )
}

fn aggregation_oracle() -> Verdict {
    let mut r = rng(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = r.random_range(1..=6);
        let sets: Vec<(ModelParams, usize, u64)> = (0..k)
            .map(|_| {
                let mut p = ModelParams::new();
                p.insert("a", Tensor::randn(&[3, 2], 1.0, &mut r));
                p.insert("b", Tensor::randn(&[4], 2.0, &mut r));
                (p, r.random_range(1..500), r.random_range(0..50))
            })
            .collect();
        let fedavg = aggregate_fedavg(&sets.iter().map(|(p, n, _)| (p.clone(), *n)).collect::<Vec<_>>()).unwrap();
        for mode in [AggregationMode::SelffedLiteral, AggregationMode::SelffedNormalized] {
            worst = worst.max(aggregate_selffed(&sets, 1.0, mode).unwrap().max_abs_diff(&fedavg));
        }
    }
    let updates = vec![(scalar(2.0), 10, 1), (scalar(4.0), 10, 2)];
    let lit = aggregate_selffed(&updates, 0.95, AggregationMode::SelffedLiteral).unwrap().get("w").unwrap().data()[0];
    let norm = aggregate_selffed(&updates, 0.95, AggregationMode::SelffedNormalized).unwrap().get("w").unwrap().data()[0];
    let hand_norm = (0.5 * 0.95 * 2.0 + 0.5 * 0.9025 * 4.0) / (0.5 * 0.95 + 0.5 * 0.9025);
    let hand = (lit - 2.755).abs().max((norm - hand_norm).abs());
    let pass = worst <= 1e-12 && hand <= 1e-12 && (norm - 2.9744).abs() < 1e-4;
    report(
        2,
        "aggregation oracle",
        pass,
        format!("beta=1 vs FedAvg over 100 sets max |d| {worst:.1e} tol 1e-12; literal {lit:.6} normalized {norm:.6} hand |d| {hand:.1e} tol 1e-12"),
    )
}

fn ema_oracle() -> Verdict {
    let params = |v: &[f64]| {
        let mut p = ModelParams::new();
        p.insert("a", Tensor::from_vec(v.to_vec()));
        p
    };
    let q0 = params(&[1.5, -2.0, 0.25]);
    let phi = params(&[0.1, 0.7, -3.0]);
    let mut frozen = q0.clone();
    ema_update(&mut frozen, &phi, 1.0).unwrap();
    let mut copied = q0.clone();
    ema_update(&mut copied, &phi, 0.0).unwrap();
    let limits = frozen == q0 && copied.get("a").unwrap().data() == phi.get("a").unwrap().data();

    // Frozen online weights: q_k = θ^k q_0 + (1 - θ^k) φ.
    let theta: f64 = 0.93;
    let mut r = rng(9);
    let start = Tensor::randn(&[6], 1.0, &mut r);
    let online = params(Tensor::randn(&[6], 1.0, &mut r).data());
    let mut q = params(start.data());
    let mut worst = 0.0f64;
    for k in 1..=60 {
        ema_update(&mut q, &online, theta).unwrap();
        let tk = theta.powi(k);
        for j in 0..6 {
            let closed = tk * start.data()[j] + (1.0 - tk) * online.get("a").unwrap().data()[j];
            worst = worst.max((q.get("a").unwrap().data()[j] - closed).abs());
        }
    }
    report(
        3,
        "EMA oracle",
        limits && worst <= 1e-10,
        format!("theta=1 freeze and theta=0 copy exact: {limits}; 60-step closed form max |d| {worst:.1e} tol 1e-10"),
    )
}

fn reference_fifo(cap: usize, pushes: &[Vec<usize>]) -> Vec<usize> {
    let mut list: Vec<usize> = vec![];
    for batch in pushes {
        for &id in batch {
            list.push(id);
            if list.len() > cap {
                list.remove(0);
            }
        }
    }
    list
}

fn info_nce_oracle() -> Verdict {
    let e = std::f64::consts::E;
    let mut q = MemoryQueue::new(4, 3);
    q.push_rows(&[&unit(3, 1), &unit(3, 2)]).unwrap();
    let l = info_nce(&unit(3, 0), &unit(3, 0), &q, 1.0, InfoNceMode::WithPositive).unwrap();
    let err = (l + (e / (e + 2.0)).ln()).abs();

    let mut negs = MemoryQueue::new(4, 3);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    negs.push_rows(&[&unit(3, 2), &[-s, 0.0, s]]).unwrap();
    let losses: Vec<f64> = (0..=40)
        .map(|i| {
            let c = -1.0 + i as f64 / 20.0;
            let pp = [c, (1.0 - c * c).max(0.0).sqrt(), 0.0];
            info_nce(&unit(3, 0), &pp, &negs, 0.2, InfoNceMode::WithPositive).unwrap()
        })
        .collect();
    let monotone = losses.windows(2).all(|w| w[1] < w[0]);

    const D: usize = 64;
    let mut r = rng(77);
    let mut fifo_ok = true;
    for cap in 1..=16 {
        for _ in 0..20 {
            let mut next = 0usize;
            let pushes: Vec<Vec<usize>> = (0..r.random_range(1..12))
                .map(|_| {
                    (0..r.random_range(0..6))
                        .map(|_| {
                            next += 1;
                            next - 1
                        })
                        .collect()
                })
                .collect();
            let mut q = MemoryQueue::new(cap, D);
            for batch in &pushes {
                let vs: Vec<Vec<f64>> = batch.iter().map(|&i| unit(D, i)).collect();
                let refs: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
                q.push_rows(&refs).unwrap();
            }
            let ids: Vec<usize> = q.iter().map(|v| v.iter().position(|&x| x == 1.0).unwrap()).collect();
            fifo_ok &= ids == reference_fifo(cap, &pushes);
        }
    }
    report(
        4,
        "InfoNCE oracle",
        err <= 1e-10 && monotone && fifo_ok,
        format!("unit case {l:.10} |d| {err:.1e} tol 1e-10; decreasing over 41 cosines: {monotone}; FIFO capacities 1-16: {fifo_ok}"),
    )
}

fn masking_laws() -> Verdict {
    let mut r = rng(3);
    let mut counts_ok = true;
    for patches in [1, 2, 4, 7, 16, 49, 64, 100] {
        for i in 0..=20 {
            let ratio = i as f64 / 20.0;
            let plan = sample_mask(patches, ratio, &mut r).unwrap();
            let mut all: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
            all.sort_unstable();
            counts_ok &= all == (0..patches).collect::<Vec<_>>()
                && plan.masked.len() == (ratio * patches as f64).floor() as usize
                && plan.masked.len() == masked_count(patches, ratio);
        }
    }
    let mut round_trip = true;
    for (side, channels, patch) in [(32, 1, 4), (32, 3, 8), (8, 1, 8), (12, 2, 3)] {
        let grid = PatchGrid::square(side, channels, patch).unwrap();
        let img = Tensor::uniform(&[side, side, channels], -1.0, 1.0, &mut r);
        round_trip &= reassemble(&partition_patches(&img, patch).unwrap(), &grid).unwrap() == img;
    }
    let grid = PatchGrid::square(32, 1, 4).unwrap();
    let target = Tensor::uniform(&[32, 32, 1], 0.0, 1.0, &mut r);
    let pred = Tensor::uniform(&[32, 32, 1], 0.0, 1.0, &mut r);
    let plan = sample_mask(grid.count(), 0.6, &mut r).unwrap();
    let base = masked_mse(&pred, &target, &plan, &grid).unwrap();
    let mut invariant = true;
    for _ in 0..20 {
        let mut patches = partition_patches(&pred, 4).unwrap();
        for &j in &plan.visible {
            let row_len = grid.patch_len();
            for v in &mut patches.data_mut()[j * row_len..(j + 1) * row_len] {
                *v += r.random_range(-5.0..5.0);
            }
        }
        let perturbed = reassemble(&patches, &grid).unwrap();
        invariant &= masked_mse(&perturbed, &target, &plan, &grid).unwrap() == base;
    }
    report(
        5,
        "masking and partition laws",
        counts_ok && round_trip && invariant,
        format!("8 patch counts x 21 ratios sizes exact: {counts_ok}; round trip bit-exact: {round_trip}; masked MSE unchanged under 20 visible perturbations: {invariant}"),
    )
}

fn dirichlet_statistics() -> Verdict {
    let t = Instant::now();
    let mut d = Dataset::empty(2, Split::Train);
    for i in 0..600 {
        d.images.push(Tensor::zeros(&[1, 1, 1]));
        d.labels.push(i % 2);
        d.ids.push(i as u64);
    }
    let mut rows_worst = 0.0f64;
    let medians: Vec<f64> = [0.5, 1.0, 100.0]
        .iter()
        .map(|&delta| {
            let deficits = (0..20)
                .map(|s| {
                    let plan = dirichlet_partition(&d, 5, delta, None, &mut rng(s)).unwrap();
                    for row in &plan.rho {
                        rows_worst = rows_worst.max((row.iter().sum::<f64>() - 1.0).abs());
                    }
                    heterogeneity_score(&plan).entropy_deficit
                })
                .collect();
            median(deficits)
        })
        .collect();
    let secs = t.elapsed().as_secs_f64();
    let ordered = medians[0] > medians[1] && medians[1] > medians[2];
    report(
        6,
        "Dirichlet statistics",
        rows_worst <= 1e-9 && ordered && secs < 30.0,
        format!(
            "rho row sums max |d| {rows_worst:.1e} tol 1e-9; median entropy deficit d=0.5 {:.4} > d=1 {:.4} > d=100 {:.4}: {ordered}; {secs:.2}s of 30s",
            medians[0], medians[1], medians[2]
        ),
    )
}

/// Desk regimen for the label-scarcity comparison.
fn trend_config(seed: u64, mode: RunMode, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed: Some(seed), mode, output_dir: out.to_path_buf(), checkpoints: false, ..Default::default() };
    cfg.delta = 0.5;
    cfg.label_fraction = 0.1;
    cfg.federation.clients = 5;
    cfg.federation.beta = 0.95;
    cfg.federation.aggregation = AggregationMode::SelffedNormalized;
    cfg.federation.rounds_phase1 = 20;
    cfg.federation.rounds_phase2 = 20;
    cfg.federation.eval_every = 20;
    cfg
}

fn end_to_end_trend(dir: &Path) -> Verdict {
    let t = Instant::now();
    let mut full = vec![];
    let mut scratch = vec![];
    for seed in 0..3 {
        for (mode, acc) in [(RunMode::Full, &mut full), (RunMode::ScratchBaseline, &mut scratch)] {
            let cfg = trend_config(seed, mode, &dir.join(format!("trend_{}_{seed}", mode.method())));
            acc.push(run_experiment(&cfg).unwrap().final_accuracy.unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = 100.0 * (mean(&full) - mean(&scratch));
    let secs = t.elapsed().as_secs_f64();
    report(
        7,
        "end-to-end label-scarcity trend",
        gap >= 3.0 && secs <= 900.0,
        format!(
            "3 seeds, M=5, d=0.5, 10% labels, 20+20 rounds: SelfFed {:.3} vs scratch {:.3}, gap {gap:+.1} points (need >= 3); {secs:.0}s of 900s",
            mean(&full),
            mean(&scratch)
        ),
    )
}

fn skewed_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed: Some(17), output_dir: out.to_path_buf(), label_fraction: 0.5, ..Default::default() };
    cfg.federation.clients = 5;
    cfg.federation.clients_per_round = 2;
    cfg.federation.schedule = SelectionSchedule::Skewed { weights: vec![3.0, 1.0, 1.0, 1.0, 1.0] };
    cfg.federation.rounds_phase1 = 3;
    cfg.federation.rounds_phase2 = 2;
    cfg.federation.batch_size = 16;
    cfg.federation.eval_samples = 8;
    cfg.federation.server_batch = 4;
    cfg.contrastive.queue_capacity = 16;
    if let DataSource::Synthetic(s) = &mut cfg.data {
        *s = SynthSpec { per_class: 30, ..s.clone() };
    }
    cfg
}

fn beta_sensitivity(dir: &Path) -> Verdict {
    // Frequencies accumulated under a 3x-skewed schedule.
    let fed = FederationConfig {
        clients: 5,
        clients_per_round: 2,
        schedule: SelectionSchedule::Skewed { weights: vec![3.0, 1.0, 1.0, 1.0, 1.0] },
        ..Default::default()
    };
    let mut clients: Vec<ClientState> = (0..5).map(|i| ClientState::new(i, vec![], vec![])).collect();
    let mut r = rng(4);
    for _ in 0..30 {
        select_clients(&fed, &mut clients, &mut r);
    }
    let freqs: Vec<u64> = clients.iter().map(|c| c.frequency).collect();
    let betas = sweep_values(SweepParam::Beta).unwrap();
    let mut decreasing = true;
    for &beta in betas.iter().filter(|&&b| b < 1.0) {
        for mode in [AggregationMode::SelffedLiteral, AggregationMode::SelffedNormalized] {
            let w = aggregation_weights(&[100; 5], &freqs, beta, mode).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    if freqs[i] < freqs[j] {
                        decreasing &= w[i] > w[j];
                    }
                }
            }
        }
    }

    let base = skewed_config(&dir.join("beta_sweep"));
    let summaries = sweep(&base, SweepParam::Beta, &betas).unwrap();
    let emitted = summaries.len() == 7
        && betas.iter().all(|b| dir.join("beta_sweep").join(format!("beta_{b}")).join("summary.json").exists());

    let mut fedavg = skewed_config(&dir.join("fedavg"));
    fedavg.federation.aggregation = AggregationMode::Fedavg;
    run_experiment(&fedavg).unwrap();
    let beta_one = dir.join("beta_sweep/beta_1");
    let mut identical = true;
    for (phase, rounds) in [(1, base.federation.rounds_phase1), (2, base.federation.rounds_phase2)] {
        for round in 1..=rounds {
            let name = checkpoint_name(phase, round);
            let a = fs::read(beta_one.join("checkpoints").join(&name)).unwrap();
            let b = fs::read(dir.join("fedavg/checkpoints").join(&name)).unwrap();
            identical &= a == b;
        }
    }
    let csv = |p: &Path| strip_timing(&fs::read_to_string(p.join("rounds.csv")).unwrap());
    identical &= csv(&beta_one) == csv(&dir.join("fedavg"));
    report(
        8,
        "beta-sensitivity mechanism",
        decreasing && emitted && identical,
        format!(
            "skewed frequencies {freqs:?}: weights strictly decreasing in F for 6 betas < 1: {decreasing}; sweep emitted {} of 7 summaries; beta=1 checkpoints and rounds bit-equal to FedAvg: {identical}",
            summaries.len()
        ),
    )
}

fn determinism(dir: &Path) -> Verdict {
    let mut same = true;
    for workers in [1, 4] {
        let runs: Vec<_> = ["a", "b"]
            .iter()
            .map(|tag| {
                let mut cfg = skewed_config(&dir.join(format!("det_{workers}_{tag}")));
                cfg.workers = workers;
                run_experiment(&cfg).unwrap();
                cfg
            })
            .collect();
        let csv = |c: &ExperimentConfig| strip_timing(&fs::read_to_string(c.output_dir.join("rounds.csv")).unwrap());
        same &= csv(&runs[0]) == csv(&runs[1]);
        let mut names: Vec<_> = fs::read_dir(runs[0].output_dir.join("checkpoints")).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        same &= names.len() == 5;
        for n in &names {
            same &= fs::read(runs[0].output_dir.join("checkpoints").join(n)).unwrap()
                == fs::read(runs[1].output_dir.join("checkpoints").join(n)).unwrap();
        }
    }
    // Worker count must not change results either.
    let csv = |tag: &str| strip_timing(&fs::read_to_string(dir.join(tag).join("rounds.csv")).unwrap());
    let across = csv("det_1_a") == csv("det_4_a");
    report(
        9,
        "determinism",
        same && across,
        format!("repeat runs byte-identical (CSV minus timing, 5 checkpoints) at workers 1 and 4: {same}; workers 1 vs 4 identical: {across}"),
    )
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let verdicts = vec![
        gradient_fidelity(),
        aggregation_oracle(),
        ema_oracle(),
        info_nce_oracle(),
        masking_laws(),
        dirichlet_statistics(),
        end_to_end_trend(dir.path()),
        beta_sensitivity(dir.path()),
        determinism(dir.path()),
    ];
    let failed: Vec<String> = verdicts.iter().filter(|v| !v.pass).map(|v| format!("[{}] {}: {}", v.id, v.name, v.detail)).collect();
    println!("{} of {} criteria pass", verdicts.len() - failed.len(), verdicts.len());
    assert!(failed.is_empty(), "failing criteria:\n{}", failed.join("\n"));
}
