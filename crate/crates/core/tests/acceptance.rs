//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria are reported, not asserted, so a faithful implementation that
//! misses a threshold still lets the rest of the workspace tests run. Set
//! `ACCEPTANCE_STRICT=1` to turn any FAIL into a non-zero exit.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hyperfcl::amr::{
    candidate_change, histogram, hyper_loss, hyper_loss_on, js_distributions, js_divergence, l_task_on,
    recalibrated_loss, recalibrated_loss_on, server_round, value_and_grad, BasicModelRegistry, Priors, Recalibration,
    RoundContext, ServerConfig, Upload,
};
use hyperfcl::federation::{chance_dice, Mode};
use hyperfcl::harness::config::ExperimentConfig;
use hyperfcl::harness::metrics::{retention, MetricsRecord};
use hyperfcl::harness::{dataset_for, run_on};
use hyperfcl::hyper::{
    generate_model, snapshot, HyperConfig, HyperParams, HyperVars, IdentityRegistry, IdentitySchedule, TaskIdentity,
};
use hyperfcl::parallel::Exec;
use hyperfcl::target::{Activation, LayerSpec, ParameterSet, TargetArchitecture};
use hyperfcl::tensor::{grad_check, AdamConfig, AdamState, Array};

struct Outcome {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn report(o: &Outcome) {
    println!(
        "{} [{}] {}: {} ({:.1} s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.detail,
        o.elapsed.as_secs_f64()
    );
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn toy_arch() -> TargetArchitecture {
    TargetArchitecture::new(vec![
        LayerSpec { n_in: 1, n_out: 2, activation: Activation::Relu },
        LayerSpec { n_in: 2, n_out: 1, activation: Activation::Sigmoid },
    ])
    .unwrap()
}

fn toy_hyper(seed: u64) -> HyperParams {
    HyperParams::init(&toy_arch(), HyperConfig { n_z: 4, hidden: 4, init_scale: 0.3 }, seed)
}

fn perturbed(h: &HyperParams, rng: &mut ChaCha8Rng, scale: f64) -> HyperParams {
    let mut out = h.clone();
    for a in out.arrays_mut() {
        for v in a.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
    out
}

fn random_set(arch: &TargetArchitecture, seed: u64) -> ParameterSet {
    ParameterSet::init_random(arch, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn sq_dist(a: &ParameterSet, b: &ParameterSet) -> f64 {
    a.flatten().data().iter().zip(b.flatten().data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

// 1. analytic vs central-difference gradients of both server objectives
fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let arch = toy_arch();
    let mut reg = IdentityRegistry::new(4);
    for task in 1..=3 {
        reg.register(task, 5).unwrap();
    }
    let h0 = toy_hyper(1);
    let snap = snapshot(&h0);
    let prior_ids: Vec<&TaskIdentity> = reg.iter().skip(1).collect();
    let priors = Priors::new(&snap, &prior_ids, &arch).unwrap();
    let h = perturbed(&h0, &mut ChaCha8Rng::seed_from_u64(2), 0.01);
    let id = reg.get(1).unwrap();
    let basic = random_set(&arch, 3);
    let upload = random_set(&arch, 4);
    let cfg = ServerConfig { beta: 0.7, beta1: 0.4, beta2: 0.9, ..Default::default() };
    let d1 = candidate_change(&h, id, &basic, &arch, &cfg).unwrap();
    let d2 = candidate_change(&h, id, &upload, &arch, &cfg).unwrap();
    let params: Vec<Array> = h.arrays().into_iter().cloned().collect();
    let plain = grad_check(
        |tape, vars| hyper_loss_on(tape, &arch, &HyperVars { flat: vars.to_vec() }, &id.z, &upload, &d2, &priors, cfg.beta),
        &params,
        1e-5,
    )
    .unwrap();
    let r = Recalibration {
        basic: &basic,
        upload: &upload,
        delta_basic: &d1,
        delta_upload: &d2,
        w_s: 0.6,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
    };
    let recal = grad_check(
        |tape, vars| recalibrated_loss_on(tape, &arch, &HyperVars { flat: vars.to_vec() }, &id.z, &priors, &r),
        &params,
        1e-5,
    )
    .unwrap();
    let worst = plain.max_rel_error.max(recal.max_rel_error);
    let elapsed = t.elapsed();
    Outcome {
        id: "1",
        name: "gradient correctness",
        pass: worst <= 1e-4 && elapsed < Duration::from_secs(10),
        detail: format!(
            "max rel error hyper_loss {:.2e}, recalibrated_loss {:.2e} (<= 1e-4, {} coords each, runtime < 10 s)",
            plain.max_rel_error, recal.max_rel_error, plain.coordinates
        ),
        elapsed,
    }
}

fn tiny_seg_identities(tasks: u32) -> IdentityRegistry {
    let mut reg = IdentityRegistry::with_schedule(16, IdentitySchedule::SPREAD);
    for t in 1..=tasks {
        reg.register(t, 7).unwrap();
    }
    reg
}

// 2. the hypernetwork can hold three frozen uploads at once
fn mapping_fidelity() -> Outcome {
    let t = Instant::now();
    let arch = TargetArchitecture::tiny_seg();
    let reg = tiny_seg_identities(3);
    let targets: Vec<ParameterSet> = (1..=3).map(|k| random_set(&arch, 100 + k)).collect();
    let ids: Vec<&TaskIdentity> = reg.iter().collect();
    let mut h = HyperParams::init(&arch, HyperConfig::default(), 9);
    let mut adam = AdamState::new(AdamConfig::default(), h.arrays());
    let rel = |h: &HyperParams| -> Vec<f64> {
        ids.iter()
            .zip(&targets)
            .map(|(id, m)| (sq_dist(&generate_model(h, id, &arch).unwrap(), m) / m.flatten().norm_sq()).sqrt())
            .collect()
    };
    let mut steps = 0;
    while steps < 2000 && rel(&h).iter().any(|&e| e > 1e-2) {
        for _ in 0..50 {
            let (_, g) = value_and_grad(&h, |tape, vars| {
                let mut total = None;
                for (id, m) in ids.iter().zip(&targets) {
                    let l = l_task_on(tape, &arch, vars, &id.z, m)?;
                    total = Some(match total {
                        None => l,
                        Some(acc) => tape.add(acc, l)?,
                    });
                }
                Ok(total.expect("three tasks"))
            })
            .unwrap();
            adam.step(&mut h.arrays_mut(), &g).unwrap();
        }
        steps += 50;
    }
    let errors = rel(&h);
    let elapsed = t.elapsed();
    Outcome {
        id: "2",
        name: "mapping fidelity",
        pass: errors.iter().all(|&e| e <= 1e-2) && elapsed < Duration::from_secs(120),
        detail: format!(
            "relative L2 errors [{}] after {steps} server steps (<= 1e-2 each, <= 2000 steps, runtime < 2 min)",
            errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(", ")
        ),
        elapsed,
    }
}

fn upload(task: u32, slot: usize, weights: &ParameterSet) -> Upload {
    Upload { client_id: 0, task_id: task, round_index: 0, slot, weights: weights.clone() }
}

// 3. drift of task 1 while learning task 2 shrinks as beta grows
fn anti_forgetting() -> Outcome {
    let t = Instant::now();
    let arch = TargetArchitecture::tiny_seg();
    let reg = tiny_seg_identities(2);
    let m1 = random_set(&arch, 201);
    let m2 = random_set(&arch, 202);
    let rounds = 5;
    let base = ServerConfig { server_steps_per_round: 50, ..Default::default() };
    let mut h = HyperParams::init(&arch, HyperConfig::default(), 11);
    let mut registry = BasicModelRegistry::new();
    let snap0 = snapshot(&h);
    for r in 0..rounds {
        let ctx = RoundContext { arch: &arch, identities: &reg, snapshot: &snap0, slot: 0, round: r, config: &base };
        server_round(&mut h, &mut registry, &[upload(1, 0, &m1)], &ctx).unwrap();
    }
    let star = snapshot(&h);
    let anchor = generate_model(&h, reg.get(1).unwrap(), &arch).unwrap();
    let betas = [0.0, 0.01, 0.1, 1.0];
    let drifts: Vec<f64> = betas
        .iter()
        .map(|&beta| {
            let cfg = ServerConfig { beta, beta1: beta, beta2: beta, ..base.clone() };
            let mut h = h.clone();
            let mut registry = registry.clone();
            for r in 0..rounds {
                let ctx =
                    RoundContext { arch: &arch, identities: &reg, snapshot: &star, slot: 1, round: rounds + r, config: &cfg };
                server_round(&mut h, &mut registry, &[upload(2, 1, &m2)], &ctx).unwrap();
            }
            sq_dist(&generate_model(&h, reg.get(1).unwrap(), &arch).unwrap(), &anchor)
        })
        .collect();
    let monotone = drifts.windows(2).all(|w| w[1] <= w[0]);
    let ratio = drifts[3] / drifts[0];
    let elapsed = t.elapsed();
    Outcome {
        id: "3",
        name: "anti-forgetting monotonicity",
        pass: monotone && ratio <= 0.1 && elapsed < Duration::from_secs(120),
        detail: format!(
            "D(beta) for beta in {betas:?} = [{}], non-increasing {monotone}, D(1)/D(0) = {ratio:.3} (<= 0.1, runtime < 2 min)",
            drifts.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>().join(", ")
        ),
        elapsed,
    }
}

// 4. the recalibrated objective with identical uploads reduces to the plain objective
fn recalibration_collapse() -> Outcome {
    let t = Instant::now();
    let arch = toy_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = 0.0;
    for k in 0..20u64 {
        let mut reg = IdentityRegistry::new(4);
        let tasks = rng.random_range(2..5u32);
        for task in 1..=tasks {
            reg.register(task, 300 + k).unwrap();
        }
        let h0 = toy_hyper(400 + k);
        let snap = snapshot(&h0);
        let prior_ids: Vec<&TaskIdentity> = reg.iter().skip(1).collect();
        let priors = Priors::new(&snap, &prior_ids, &arch).unwrap();
        let h = perturbed(&h0, &mut rng, 0.05);
        let beta = rng.random_range(0.0..2.0);
        let cfg = ServerConfig { beta, beta1: beta, beta2: beta, ..Default::default() };
        let m = random_set(&arch, 500 + k);
        let id = reg.get(1).unwrap();
        let (recal, _) = recalibrated_loss(&h, id, Some(&m), &m, &priors, &arch, &cfg).unwrap();
        let plain = hyper_loss(&h, id, &m, &priors, &arch, &cfg).unwrap();
        worst = worst.max((recal - plain).abs());
    }
    Outcome {
        id: "4",
        name: "recalibration collapse",
        pass: worst <= 1e-12,
        detail: format!("max |recalibrated - hyper_loss| = {worst:.2e} over 20 instances (<= 1e-12)"),
        elapsed: t.elapsed(),
    }
}

/// Base-2 JS through entropies: H(M) - (H(P) + H(Q)) / 2.
fn js_entropy_oracle(p: &[f64], q: &[f64]) -> f64 {
    let h = |d: &[f64]| -> f64 { -d.iter().filter(|&&x| x > 0.0).map(|&x| x * x.log2()).sum::<f64>() };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    h(&m) - (h(p) + h(q)) / 2.0
}

/// Smoothed histogram built by direct counting over `[lo, hi]`.
fn histogram_oracle(values: &[f64], lo: f64, hi: f64, bins: usize, eps: f64) -> Vec<f64> {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let mut b = 0;
        while b + 1 < bins && v >= lo + (hi - lo) * (b + 1) as f64 / bins as f64 {
            b += 1;
        }
        counts[b] += 1;
    }
    let raw: Vec<f64> = counts.iter().map(|&c| c as f64 / values.len() as f64 + eps).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total).collect()
}

// 5. JS divergence against direct summation, plus its symmetry and bounds
fn js_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let bins = rng.random_range(2..9);
        let n = rng.random_range(5..40);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..1.5)).collect();
        let lo = a.iter().chain(&b).cloned().fold(f64::INFINITY, f64::min);
        let hi = a.iter().chain(&b).cloned().fold(f64::NEG_INFINITY, f64::max);
        let (pa, pb) = (histogram_oracle(&a, lo, hi, bins, 1e-8), histogram_oracle(&b, lo, hi, bins, 1e-8));
        let got = js_distributions(&histogram(&a, lo, hi, bins, 1e-8), &histogram(&b, lo, hi, bins, 1e-8));
        worst = worst.max((got - js_entropy_oracle(&pa, &pb)).abs());
    }
    let arch = toy_arch();
    let cfg = ServerConfig::default();
    let mut asym: f64 = 0.0;
    let mut in_bounds = true;
    let mut self_zero = true;
    for k in 0..1000u64 {
        let p = random_set(&arch, 10_000 + k);
        let q = random_set(&arch, 20_000 + k);
        let pq = js_divergence(&p, &q, cfg.js_bins, cfg.js_epsilon).unwrap();
        let qp = js_divergence(&q, &p, cfg.js_bins, cfg.js_epsilon).unwrap();
        asym = asym.max((pq - qp).abs());
        in_bounds &= (0.0..=1.0).contains(&pq);
        self_zero &= js_divergence(&p, &p, cfg.js_bins, cfg.js_epsilon).unwrap() == 0.0;
    }
    Outcome {
        id: "5",
        name: "JS oracle",
        pass: worst <= 1e-10 && asym == 0.0 && in_bounds && self_zero,
        detail: format!(
            "max oracle deviation {worst:.2e} on 50 histograms (<= 1e-10); 1000 pairs: max asymmetry {asym:.1e}, in [0,1] {in_bounds}, JS(P,P) = 0 {self_zero}"
        ),
        elapsed: t.elapsed(),
    }
}

/// Final rows of each client, in client order.
fn finals(records: &[MetricsRecord]) -> Vec<&MetricsRecord> {
    let clients = records.iter().map(|r| r.client + 1).max().unwrap_or(0);
    (0..clients).map(|c| records.iter().filter(|r| r.client == c).last().unwrap()).collect()
}

fn per_client_retention(records: &[MetricsRecord], tasks: &[u32]) -> Vec<f64> {
    let clients = records.iter().map(|r| r.client + 1).max().unwrap_or(0);
    (0..clients)
        .map(|c| retention(&records.iter().filter(|r| r.client == c).collect::<Vec<_>>(), tasks))
        .collect()
}

fn fmt(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", "))
}

struct Reduced {
    config: ExperimentConfig,
    runs: BTreeMap<&'static str, (Vec<MetricsRecord>, Duration)>,
    chance: Vec<Vec<f64>>,
}

fn reduced_runs() -> Reduced {
    let config = ExperimentConfig::load(&configs_dir().join("reduced.json")).unwrap();
    let dataset = dataset_for(&config).unwrap();
    let mut runs = BTreeMap::new();
    let mut chance = Vec::new();
    for mode in Mode::ALL {
        let t = Instant::now();
        let cfg = ExperimentConfig { mode, ..config.clone() };
        let (output, records) = run_on(&cfg, &dataset, Exec::Parallel).unwrap();
        if mode == Mode::Local {
            chance = chance_dice(&cfg.setup().arch, &output.init_model, &dataset).unwrap();
        }
        runs.insert(mode.name(), (records, t.elapsed()));
    }
    Reduced { config, runs, chance }
}

fn mean_finals(records: &[MetricsRecord]) -> Vec<f64> {
    finals(records).iter().map(|r| r.mean_dice).collect()
}

// 6. FedDAH keeps what FedAvg forgets
fn forgetting_gap(red: &Reduced) -> Vec<Outcome> {
    let (dah, t_dah) = &red.runs["feddah"];
    let (avg, t_avg) = &red.runs["fedavg"];
    let elapsed = *t_dah + *t_avg;
    let (d, a) = (mean_finals(dah), mean_finals(avg));
    let gaps: Vec<f64> = d.iter().zip(&a).map(|(x, y)| x - y).collect();
    let shared = &red.config.shared_initial;
    let (rd, ra) = (per_client_retention(dah, shared), per_client_retention(avg, shared));
    vec![
        Outcome {
            id: "6a",
            name: "forgetting gap, final mean Dice",
            pass: gaps.iter().all(|&g| g >= 0.15),
            detail: format!("feddah {} vs fedavg {}, gaps {} (each >= 0.15)", fmt(&d), fmt(&a), fmt(&gaps)),
            elapsed,
        },
        Outcome {
            id: "6b",
            name: "forgetting gap, shared-task retention",
            pass: rd.iter().all(|&r| r >= 0.85) && ra.iter().all(|&r| r <= 0.60),
            detail: format!("feddah {} (each >= 0.85), fedavg {} (each <= 0.60)", fmt(&rd), fmt(&ra)),
            elapsed,
        },
    ]
}

// 7. every ablation loses to the full method, dropping L_R loses the most
fn ablation_ordering(red: &Reduced) -> Outcome {
    let full = mean_finals(&red.runs["feddah"].0);
    let mut ok = true;
    let mut parts = Vec::new();
    let mut elapsed = red.runs["feddah"].1;
    let mut lr_drop = 0.0;
    for name in ["ablate_dahyper", "ablate_lr", "ablate_ws"] {
        let (records, t) = &red.runs[name];
        elapsed += *t;
        let ab = mean_finals(records);
        ok &= full.iter().zip(&ab).all(|(f, a)| f >= a);
        let drop = full.iter().zip(&ab).map(|(f, a)| f - a).sum::<f64>() / full.len() as f64;
        if name == "ablate_lr" {
            lr_drop = drop;
        }
        parts.push(format!("{name} {} (mean drop {drop:.3})", fmt(&ab)));
    }
    Outcome {
        id: "7",
        name: "ablation ordering",
        pass: ok && lr_drop >= 0.05,
        detail: format!(
            "full {} >= per client: {}; ablate_lr drop {lr_drop:.3} (>= 0.05)",
            fmt(&full),
            parts.join(", ")
        ),
        elapsed,
    }
}

// 10. a never-trained channel stays at chance locally but not under FedDAH
fn unseen_task(red: &Reduced) -> Outcome {
    let local = finals(&red.runs["local"].0);
    let dah = finals(&red.runs["feddah"].0);
    let mut local_dev: f64 = 0.0;
    let mut min_lift = f64::INFINITY;
    let mut pairs = 0;
    for (c, own) in red.config.unique_pools.iter().enumerate() {
        for (o, pool) in red.config.unique_pools.iter().enumerate() {
            if o == c {
                continue;
            }
            for &t in pool {
                debug_assert!(!own.contains(&t));
                let ch = t as usize - 1;
                let chance = red.chance[c][ch];
                local_dev = local_dev.max((local[c].dice[ch] - chance).abs());
                min_lift = min_lift.min(dah[c].dice[ch] - chance);
                pairs += 1;
            }
        }
    }
    Outcome {
        id: "10",
        name: "unseen-task capability",
        pass: local_dev <= 0.05 && min_lift >= 0.20,
        detail: format!(
            "over {pairs} (client, other client's unique task) pairs: max |local - chance| {local_dev:.3} (<= 0.05), min feddah - chance {min_lift:.3} (>= 0.20)"
        ),
        elapsed: red.runs["local"].1 + red.runs["feddah"].1,
    }
}

fn cli_run(config: &Path, out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_hyperfcl"))
        .args(["run", "--config"])
        .arg(config)
        .args(["--seed", "7", "--out"])
        .arg(out)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "hyperfcl run failed");
}

/// (round, client, task, dice) rows of a metrics file.
fn read_metrics(path: &Path) -> Vec<(usize, usize, Option<u32>, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            let task = if r[4].is_empty() { None } else { Some(r[4].parse().unwrap()) };
            (r[2].parse().unwrap(), r[3].parse().unwrap(), task, (5..20).map(|i| r[i].parse().unwrap()).collect())
        })
        .collect()
}

// 8. a task's second optimization episode does not undo its first
fn continual_improvement(metrics: &Path, rounds_per_task: usize, elapsed: Duration) -> Outcome {
    let rows = read_metrics(metrics);
    let mut slots: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    let mut clients: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for (round, client, task, _) in &rows {
        if let Some(t) = task {
            slots.entry(*t).or_default().insert(round / rounds_per_task);
            clients.entry(*t).or_default().insert(*client);
        }
    }
    // a task's Dice after an episode: mean over clients at the episode's last round
    let dice_at = |t: u32, slot: usize| -> f64 {
        let last = (slot + 1) * rounds_per_task - 1;
        let vals: Vec<f64> = rows.iter().filter(|r| r.0 == last).map(|r| r.3[t as usize - 1]).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for (t, s) in &slots {
        if s.len() < 2 || clients[t].len() < 2 {
            continue;
        }
        let mut it = s.iter();
        let (s1, s2) = (*it.next().unwrap(), *it.next().unwrap());
        let (d1, d2) = (dice_at(*t, s1), dice_at(*t, s2));
        ok &= d2 >= d1 - 0.02;
        parts.push(format!("t{t} {d1:.3}->{d2:.3}"));
    }
    Outcome {
        id: "8",
        name: "continual improvement on repeated tasks",
        pass: ok && !parts.is_empty(),
        detail: format!("Dice after 1st -> 2nd episode: {} (2nd >= 1st - 0.02)", parts.join(", ")),
        elapsed,
    }
}

// 9. same config and seed, same bytes
fn determinism(a: &Path, b: &Path, elapsed: Duration) -> Outcome {
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let (csv, json) = (same("metrics.csv"), same("summary.json"));
    Outcome {
        id: "9",
        name: "determinism",
        pass: csv && json,
        detail: format!("two `run --config default.json --seed 7`: metrics.csv identical {csv}, summary.json identical {json}"),
        elapsed,
    }
}

fn main() {
    // the test runner passes filter and formatting flags; a `--list` probe
    // must not start the suite
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut outcomes = Vec::new();
    let emit = |o: Outcome, all: &mut Vec<Outcome>| {
        report(&o);
        all.push(o);
    };
    emit(gradient_correctness(), &mut outcomes);
    emit(mapping_fidelity(), &mut outcomes);
    emit(anti_forgetting(), &mut outcomes);
    emit(recalibration_collapse(), &mut outcomes);
    emit(js_oracle(), &mut outcomes);

    let red = reduced_runs();
    for o in forgetting_gap(&red) {
        emit(o, &mut outcomes);
    }
    emit(ablation_ordering(&red), &mut outcomes);

    let default = configs_dir().join("default.json");
    let rounds = ExperimentConfig::load(&default).unwrap().rounds_per_task;
    // both runs target the same out dir, as the bare command would; the
    // first run's files are moved aside before the second starts
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("first"), dir.path().join("run"));
    let t = Instant::now();
    cli_run(&default, &b);
    let first = t.elapsed();
    std::fs::rename(&b, &a).unwrap();
    cli_run(&default, &b);
    emit(continual_improvement(&a.join("metrics.csv"), rounds, first), &mut outcomes);
    emit(determinism(&a, &b, t.elapsed()), &mut outcomes);
    emit(unseen_task(&red), &mut outcomes);

    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("acceptance: {} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
