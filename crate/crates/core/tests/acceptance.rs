//! Acceptance checks, run as a plain binary so every result line is printed.
//! Pass criterion numbers as arguments to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dba3c::algo::{loss_and_grad, AlgoConfig, DataPoint, MiniBatch};
use dba3c::env::Observation;
use dba3c::nncore::{NetArch, NetGradient, ParamVector};
use dba3c::optim::{adam_step_canonical, adam_step_fast, AdamState, OptimConfig, OptimVariant};
use dba3c::runtime::{
    launch_local, run_local, straggler_threshold, ChiefCore, Mode, PushOutcome, RunReport,
    TrainConfig, TransportKind,
};
use dba3c::shard::make_shards;
use dba3c::telemetry::{read_csv, write_staleness_histogram};
use dba3c::transport::{decode, encode, Msg, Values};

use common::{double, max_abs_diff, monolithic_trajectory, small_config};

struct Outcome {
    pass: bool,
    detail: String,
    /// Set when the host cannot exercise the criterion; a failure is then
    /// reported but does not fail the run.
    unmet_precondition: Option<String>,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass,
        detail,
        unmet_precondition: None,
    }
}

type Check = fn() -> Outcome;

fn main() {
    let checks: [(u32, &str, Check); 12] = [
        (1, "optimizer oracle equivalence", c1_optimizer_oracle),
        (2, "formulation identity", c2_formulation_identity),
        (3, "gradient correctness", c3_gradient_check),
        (4, "sync equals large batch", c4_sync_large_batch),
        (5, "staleness dichotomy", c5_staleness),
        (6, "straggler cutoff", c6_straggler),
        (7, "communication accounting", c7_bytes),
        (8, "learning at desk scale", c8_learning),
        (9, "throughput scaling", c9_throughput),
        (10, "protocol robustness", c10_protocol),
        (11, "transport equivalence", c11_transport),
        (12, "epsilon sweep artifact", c12_eps_sweep),
    ];
    let only: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();

    let mut failed = 0;
    for (id, name, check) in checks {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let mut line = format!(
            "criterion {id:>2} {verdict} {name}: {} [{:.1}s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        match (&o.unmet_precondition, o.pass) {
            (Some(why), false) => line.push_str(&format!(" (not counted: {why})")),
            (None, false) => failed += 1,
            _ => {}
        }
        println!("{line}");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Scalar Adam written straight from the update rules, one coordinate at a
/// time, with the bias-correction powers kept as running products.
struct ScalarAdam {
    m: f64,
    v: f64,
    b1t: f64,
    b2t: f64,
}

impl ScalarAdam {
    fn new() -> Self {
        Self {
            m: 0.0,
            v: 0.0,
            b1t: 1.0,
            b2t: 1.0,
        }
    }

    fn moments(&mut self, g: f64, cfg: &OptimConfig) {
        self.b1t *= cfg.beta1;
        self.b2t *= cfg.beta2;
        self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * g;
        self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * g * g;
    }

    fn canonical(&mut self, theta: f64, g: f64, cfg: &OptimConfig) -> f64 {
        self.moments(g, cfg);
        let m_hat = self.m / (1.0 - self.b1t);
        let v_hat = self.v / (1.0 - self.b2t);
        theta - cfg.eta * m_hat / (v_hat.sqrt() + cfg.epsilon)
    }

    fn fast(&mut self, theta: f64, g: f64, cfg: &OptimConfig) -> f64 {
        self.moments(g, cfg);
        let eta_t = cfg.eta * (1.0 - self.b2t).sqrt() / (1.0 - self.b1t);
        theta - eta_t * self.m / (self.v.sqrt() + cfg.epsilon_hat)
    }
}

fn random_grad(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let scale = 10f64.powf(rng.gen_range(-3.0..1.0));
    (0..dim).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
}

fn c1_optimizer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    // relative error of each step's increment; parameters pass through zero,
    // where any rounding difference is unboundedly relative
    let mut worst = 0f64;
    let mut worst_abs = 0f64;
    let mut trajectories = 0;
    for trial in 0..40 {
        let dim = if trial % 10 == 0 { 1000 } else { 1 };
        for variant in [OptimVariant::AdamCanonical, OptimVariant::AdamFast] {
            let cfg = OptimConfig {
                eta: rng.gen_range(1e-4..1e-2),
                beta1: rng.gen_range(0.5..0.95),
                beta2: rng.gen_range(0.5..0.999),
                epsilon: 1e-8,
                epsilon_hat: 1e-8,
                variant,
                ..OptimConfig::default()
            };
            let mut theta: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut oracle_theta = theta.clone();
            let mut state = AdamState::<f64>::new(dim);
            let mut oracle: Vec<ScalarAdam> = (0..dim).map(|_| ScalarAdam::new()).collect();
            let zeros = ParamVector::from_vec(vec![0.0f64; dim]);
            for _ in 0..100 {
                let g = random_grad(&mut rng, dim);
                let g_ = NetGradient::from_vec(g.clone());
                let step = |p: &ParamVector<f64>, s: &AdamState<f64>| match variant {
                    OptimVariant::AdamCanonical => adam_step_canonical(p, &g_, s, &cfg),
                    _ => adam_step_fast(p, &g_, s, &cfg),
                }
                .expect("adam step");
                // the update does not depend on the parameters, so a step
                // from zero yields the increment without cancellation
                let (delta, _) = step(&zeros, &state);
                let (next, s) = step(&ParamVector::from_vec(theta), &state);
                theta = next.into_vec();
                state = s;
                for i in 0..dim {
                    let d = match variant {
                        OptimVariant::AdamCanonical => oracle[i].canonical(0.0, g[i], &cfg),
                        _ => oracle[i].fast(0.0, g[i], &cfg),
                    };
                    worst = worst.max(rel_err(delta.as_slice()[i], d));
                    oracle_theta[i] += d;
                }
                worst_abs = worst_abs.max(max_abs_diff(&theta, &oracle_theta));
            }
            trajectories += 1;
        }
    }
    outcome(
        worst <= 1e-12,
        format!(
            "{trajectories} trajectories x 100 steps, max relative update error {worst:.2e} (tol 1e-12), free-running max |diff| {worst_abs:.1e}"
        ),
    )
}

fn c2_formulation_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0f64;
    for trial in 0..20 {
        let dim = if trial == 0 { 1000 } else { rng.gen_range(1..64) };
        let base = OptimConfig {
            eta: rng.gen_range(1e-4..1e-2),
            epsilon: 0.0,
            epsilon_hat: 0.0,
            ..OptimConfig::default()
        };
        let fast_cfg = OptimConfig {
            variant: OptimVariant::AdamFast,
            ..base
        };
        let mut a = ParamVector::from_vec((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
        let mut b = a.clone();
        let (mut sa, mut sb) = (AdamState::new(dim), AdamState::new(dim));
        for _ in 0..100 {
            let g = NetGradient::from_vec(random_grad(&mut rng, dim));
            (a, sa) = adam_step_canonical(&a, &g, &sa, &base).unwrap();
            (b, sb) = adam_step_fast(&b, &g, &sb, &fast_cfg).unwrap();
            worst = worst.max(max_abs_diff(a.as_slice(), b.as_slice()));
        }
    }
    outcome(
        worst <= 1e-10,
        format!("20 runs x 100 steps with eps = eps_hat = 0, max |diff| {worst:.2e} (tol 1e-10)"),
    )
}

/// Policy, value and entropy terms recomputed from the flat parameter
/// vector, with the advantages supplied from outside so they stay fixed
/// while the parameters are perturbed.
fn oracle_loss(
    dims: (usize, usize, usize),
    theta: &[f64],
    points: &[DataPoint],
    advantages: Option<&[f64]>,
    cfg: &AlgoConfig,
) -> (f64, Vec<f64>) {
    let (inp, hid, act) = dims;
    let hw = &theta[..inp * hid];
    let hb = &theta[inp * hid..inp * hid + hid];
    let pw_at = inp * hid + hid;
    let pw = &theta[pw_at..pw_at + hid * act];
    let pb = &theta[pw_at + hid * act..pw_at + hid * act + act];
    let vw_at = pw_at + hid * act + act;
    let vw = &theta[vw_at..vw_at + hid];
    let vb = theta[vw_at + hid];

    let mut total = 0.0;
    let mut values = Vec::with_capacity(points.len());
    for (n, dp) in points.iter().enumerate() {
        let x: Vec<f64> = dp.obs.as_slice().iter().map(|&v| v as f64).collect();
        let h: Vec<f64> = (0..hid)
            .map(|j| {
                let z = hb[j] + (0..inp).map(|i| x[i] * hw[i * hid + j]).sum::<f64>();
                z.max(0.0)
            })
            .collect();
        let logits: Vec<f64> = (0..act)
            .map(|k| pb[k] + (0..hid).map(|j| h[j] * pw[j * act + k]).sum::<f64>())
            .collect();
        let value = vb + (0..hid).map(|j| h[j] * vw[j]).sum::<f64>();
        let norm = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
        let logp: Vec<f64> = logits.iter().map(|z| z - norm).collect();
        let entropy = -logp.iter().map(|l| l.exp() * l).sum::<f64>();
        let adv = advantages.map_or(dp.n_step_return - value, |a| a[n]);
        let err = dp.n_step_return - value;
        total += -logp[dp.action] * adv + cfg.value_coef * err * err - cfg.entropy_coef * entropy;
        values.push(value);
    }
    (total / points.len() as f64, values)
}

fn c3_gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let h = 1e-6;
    let instances = 200;
    let mut worst = 0f64;
    let mut worst_loss = 0f64;
    for _ in 0..instances {
        let dims = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(2..5));
        let arch = NetArch::new(dims.0, dims.1, dims.2).unwrap();
        let cfg = AlgoConfig {
            value_coef: rng.gen_range(0.1..1.0),
            entropy_coef: rng.gen_range(0.0..0.1),
            ..AlgoConfig::default()
        };
        let theta: Vec<f64> = (0..arch.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let points: Vec<DataPoint> = (0..rng.gen_range(1..6))
            .map(|_| DataPoint {
                obs: Observation((0..dims.0).map(|_| rng.gen_range(-1.0f32..1.0)).collect()),
                action: rng.gen_range(0..dims.2),
                n_step_return: rng.gen_range(-2.0..2.0),
            })
            .collect();

        let out = loss_and_grad(
            &arch,
            &ParamVector::new(&arch, theta.clone()).unwrap(),
            &MiniBatch::new(points.clone()),
            &cfg,
        )
        .unwrap();
        let (loss0, values) = oracle_loss(dims, &theta, &points, None, &cfg);
        worst_loss = worst_loss.max(rel_err(loss0, out.loss));
        let adv: Vec<f64> = points.iter().zip(&values).map(|(p, v)| p.n_step_return - v).collect();

        let mut fd = vec![0.0; theta.len()];
        let mut probe = theta.clone();
        for k in 0..theta.len() {
            probe[k] = theta[k] + h;
            let up = oracle_loss(dims, &probe, &points, Some(&adv), &cfg).0;
            probe[k] = theta[k] - h;
            let down = oracle_loss(dims, &probe, &points, Some(&adv), &cfg).0;
            probe[k] = theta[k];
            fd[k] = (up - down) / (2.0 * h);
        }
        let g = out.grad.as_slice();
        let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = norm(g).max(norm(&fd));
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    outcome(
        worst <= 1e-5 && worst_loss <= 1e-12,
        format!(
            "{instances} instances, max relative error {worst:.2e} (tol 1e-5), loss agreement {worst_loss:.1e}"
        ),
    )
}

fn c4_sync_large_batch() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for n in [2usize, 4] {
        let mut cfg = double(small_config(n, 50));
        cfg.record_trajectory = true;
        cfg.seed = 40 + n as u64;
        let report = run_local(cfg.clone()).expect("cluster run");
        let reference = monolithic_trajectory(&cfg);
        let steps = report.trajectory.len();
        let worst = report
            .trajectory
            .iter()
            .zip(&reference)
            .map(|(a, b)| max_abs_diff(a, b))
            .fold(0.0, f64::max);
        let moved = max_abs_diff(&reference[0], reference.last().unwrap());
        pass &= steps == 50 && worst <= 1e-9 && moved > 1e-6;
        details.push(format!("n={n}: {steps} steps, max |dtheta| {worst:.2e}"));
    }
    outcome(pass, format!("{} (tol 1e-9)", details.join(", ")))
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temp dir")
}

fn c5_staleness() -> Outcome {
    let sync = run_local(small_config(4, 1000)).expect("sync run");
    let sync_hist = &sync.telemetry.staleness_hist;
    let sync_ok = sync_hist.keys().all(|&s| s == 0) && sync.telemetry.staleness_records == 4000;

    let mut cfg = small_config(4, 1000);
    cfg.cluster.mode = Mode::Async;
    let asy = run_local(cfg).expect("async run");
    let max = asy.telemetry.max_staleness().unwrap_or(0);
    let dir = tempdir();
    let path = dir.path().join("staleness.csv");
    write_staleness_histogram(&asy.telemetry.staleness_hist, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let exported: u64 = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap())
        .sum();
    let async_ok = max >= 1 && asy.global_step == 1000 && exported == asy.telemetry.staleness_records;
    outcome(
        sync_ok && async_ok,
        format!(
            "sync: {} records, histogram {:?}; async: {} updates, max staleness {max}, {} buckets exported",
            sync.telemetry.staleness_records,
            sync_hist,
            asy.global_step,
            text.lines().count() - 1
        ),
    )
}

fn push_gradient(
    core: &mut ChiefCore<f64>,
    worker: u32,
    base: u64,
    shards: &[dba3c::shard::ShardSpec],
    rng: &mut ChaCha8Rng,
) -> PushOutcome {
    let mut order: Vec<usize> = (0..shards.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut last = PushOutcome::Partial;
    for s in order {
        let g: Vec<f64> = (0..shards[s].len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        last = core
            .on_push(worker, base, shards[s].shard_id, &Values::F64(g))
            .expect("scripted push");
    }
    last
}

fn c6_straggler() -> Outcome {
    let (n, f) = (4usize, 0.5);
    let threshold = straggler_threshold(n, f);
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let shards = make_shards(10, 3).unwrap();
    let mut core = ChiefCore::new(n, threshold, shards.clone(), vec![0.0f64; 10], OptimConfig::default());
    let rounds = 200u64;
    let mut late = 0u64;
    let mut mismatches = Vec::new();
    // (worker, base) gradients still in flight from the previous round
    let mut deferred: Vec<(u32, u64)> = Vec::new();
    for round in 0..rounds {
        let slow: Vec<u32> = deferred.iter().map(|d| d.0).collect();
        let mut arrivals: Vec<(u32, u64)> = (0..n as u32)
            .filter(|w| !slow.contains(w))
            .map(|w| (w, round))
            .collect();
        for i in (1..arrivals.len()).rev() {
            arrivals.swap(i, rng.gen_range(0..=i));
        }
        for d in deferred.drain(..) {
            let at = rng.gen_range(0..=arrivals.len());
            arrivals.insert(at, d);
        }
        let mut on_time = 0usize;
        let mut next_deferred = Vec::new();
        for (w, base) in arrivals {
            if base == round && on_time >= threshold && rng.gen_bool(0.5) {
                // reaches the chief during the next round
                next_deferred.push((w, base));
                continue;
            }
            let out = push_gradient(&mut core, w, base, &shards, &mut rng);
            let expected_late = base < round || on_time >= threshold;
            if expected_late {
                late += 1;
            } else {
                on_time += 1;
            }
            let ok = match (&out, expected_late, on_time) {
                (PushOutcome::Dropped { .. }, true, _) => true,
                (PushOutcome::Accepted { pending }, false, k) => k < threshold && *pending == k,
                (PushOutcome::Applied { contributors, .. }, false, k) => {
                    k == threshold && contributors.len() == threshold
                }
                _ => false,
            };
            if !ok {
                mismatches.push(format!("round {round} worker {w} base {base}: {out:?}"));
            }
        }
        deferred = next_deferred;
    }
    for (w, base) in std::mem::take(&mut deferred) {
        late += 1;
        if !matches!(push_gradient(&mut core, w, base, &shards, &mut rng), PushOutcome::Dropped { .. }) {
            mismatches.push(format!("final late gradient from {w} not dropped"));
        }
    }
    let tallies_ok = core
        .tallies()
        .values()
        .all(|t| t.applied == threshold as u64 && t.arrivals == t.applied + t.dropped);
    let pass = threshold == 2
        && mismatches.is_empty()
        && core.drops() == late
        && core.version() == rounds
        && tallies_ok;
    let mut detail = format!(
        "threshold {threshold}, {rounds} updates, {late} late arrivals, drop counter {}",
        core.drops()
    );
    if let Some(m) = mismatches.first() {
        detail.push_str(&format!(", first mismatch: {m}"));
    }
    outcome(pass, detail)
}

fn c7_bytes() -> Outcome {
    let steps = 20u64;
    let mut cfg = TrainConfig::default();
    cfg.cluster.n = 4;
    cfg.cluster.ps = 4;
    cfg.steps = steps;
    cfg.eval_interval = 0;
    let arch = cfg.arch().unwrap();
    let p = arch.param_count() as u64;
    let (n, ps) = (cfg.cluster.n as u64, cfg.cluster.ps as u64);
    let r = run_local(cfg).expect("sync run");

    let w = r.worker_counters();
    let value_bytes = w.tx_value_bytes + w.rx_value_bytes;
    let expected_values = steps * dba3c::transport::expected_bytes_per_sync_step(n, p);
    let mut checks = vec![
        ("worker value bytes", value_bytes, expected_values),
        ("worker tx payload", w.tx_payload_bytes, steps * n * (ps * 6 + ps * 18 + 4 * p)),
        ("worker rx payload", w.rx_payload_bytes, steps * n * (ps * 14 + 4 * p + 8)),
    ];
    let c = r.chief_counters.expect("chief counters");
    checks.push(("chief tx payload", c.tx_payload_bytes, steps * (n * 8 + ps * 14 + 4 * p)));
    checks.push(("chief rx payload", c.rx_payload_bytes, steps * (n * (ps * 18 + 4 * p) + ps * 8)));
    let s = r.ps_counters.iter().copied().sum::<dba3c::transport::CounterSnapshot>();
    checks.push(("ps tx payload", s.tx_payload_bytes, steps * (n * (ps * 14 + 4 * p) + ps * 8)));
    checks.push(("ps rx payload", s.rx_payload_bytes, steps * (n * ps * 6 + ps * 14 + 4 * p)));

    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(what, got, want)| format!("{what} {got} != {want}"))
        .collect();
    let detail = if bad.is_empty() {
        format!(
            "P={p}, {} value bytes per step = 2*n*4*P, all {} closed-form totals exact",
            value_bytes / steps,
            checks.len()
        )
    } else {
        bad.join("; ")
    };
    outcome(bad.is_empty() && r.global_step == steps, detail)
}

const LEARNING_BUDGET: Duration = Duration::from_secs(300);

fn c8_learning() -> Outcome {
    let mut hits = 0;
    let mut runs = Vec::new();
    for seed in 1..=5u64 {
        let mut cfg = TrainConfig::default();
        cfg.cluster.n = 4;
        cfg.target_score = Some(0.9);
        cfg.seed = seed;
        let handle = launch_local(cfg).expect("launch");
        let start = Instant::now();
        while !handle.is_finished() && start.elapsed() < LEARNING_BUDGET {
            std::thread::sleep(Duration::from_millis(50));
        }
        handle.stop();
        let r = handle.wait().expect("learning run");
        let ok = r.target_reached && r.wall_time_s <= LEARNING_BUDGET.as_secs_f64();
        hits += ok as usize;
        let best = r.telemetry.evals.iter().map(|e| e.mean_score).fold(f64::MIN, f64::max);
        runs.push(format!(
            "seed {seed}: {} step {} in {:.1}s",
            if ok { "hit" } else { "miss, best" },
            if ok { r.global_step.to_string() } else { format!("{best:.2}") },
            r.wall_time_s
        ));
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    outcome(
        hits >= 4,
        format!("{hits}/5 runs reached eval >= 0.9 within 300s on {threads} hardware threads ({})", runs.join("; ")),
    )
}

/// Mean dp/s over the CSV rows after the first, which includes start-up.
fn steady_dp_per_s(report: &RunReport, csv: &Path) -> (f64, usize) {
    let rows = read_csv(csv).expect("metrics csv");
    let interval: Vec<f64> = rows
        .iter()
        .skip(1)
        .filter(|r| r.step % 100 == 0 && r.step < report.global_step)
        .map(|r| r.dp_per_s)
        .collect();
    let mean = interval.iter().sum::<f64>() / interval.len().max(1) as f64;
    (mean, rows.len())
}

fn c9_throughput() -> Outcome {
    let dir = tempdir();
    let mut rates = Vec::new();
    for n in [1usize, 4] {
        let mut cfg = TrainConfig::default();
        cfg.cluster.n = n;
        cfg.steps = if n == 1 { 1200 } else { 400 };
        cfg.eval_interval = 0;
        cfg.log_interval = 100;
        let out: PathBuf = dir.path().join(format!("n{n}.csv"));
        cfg.out = Some(out.clone());
        let r = run_local(cfg).expect("throughput run");
        let (rate, rows) = steady_dp_per_s(&r, &out);
        rates.push((n, rate, rows));
    }
    let ratio = rates[1].1 / rates[0].1;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let detail = format!(
        "steady dp/s n=1 {:.0} ({} rows), n=4 {:.0} ({} rows), ratio {ratio:.2} (need >= 2) on {threads} hardware threads",
        rates[0].1, rates[0].2, rates[1].1, rates[1].2
    );
    Outcome {
        pass: ratio >= 2.0,
        detail,
        unmet_precondition: (threads < 8).then(|| format!("needs >= 8 hardware threads, host has {threads}")),
    }
}

fn random_values(rng: &mut ChaCha8Rng) -> Values {
    let len = rng.gen_range(0..48);
    if rng.gen_bool(0.5) {
        Values::F32((0..len).map(|_| rng.gen_range(-1e6f32..1e6)).collect())
    } else {
        Values::F64((0..len).map(|_| rng.gen_range(-1e12..1e12)).collect())
    }
}

fn random_msg(rng: &mut ChaCha8Rng) -> Msg {
    match rng.gen_range(0..5) {
        0 => Msg::GetParams {
            worker_id: rng.gen(),
            shard_id: rng.gen(),
        },
        1 => Msg::Params {
            shard_id: rng.gen(),
            version: rng.gen(),
            values: random_values(rng),
        },
        2 => Msg::PushGrad {
            worker_id: rng.gen(),
            base_version: rng.gen(),
            shard_id: rng.gen(),
            values: random_values(rng),
        },
        3 => Msg::WriteParams {
            shard_id: rng.gen(),
            version: rng.gen(),
            values: random_values(rng),
        },
        _ => Msg::Ack { version: rng.gen() },
    }
}

fn c10_protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut round_trips = 0;
    let mut samples = Vec::new();
    for _ in 0..10_000 {
        let msg = random_msg(&mut rng);
        let bytes = encode(&msg).unwrap();
        if decode(&bytes).ok().as_ref() == Some(&msg) {
            round_trips += 1;
        }
        if samples.len() < 256 {
            samples.push(bytes);
        }
    }
    let mut rejected = 0u64;
    let fuzzed = 1_000_000;
    let survived = catch_unwind(AssertUnwindSafe(|| {
        for i in 0..fuzzed {
            let bytes: Vec<u8> = if i % 2 == 0 {
                let len = rng.gen_range(0..64);
                (0..len).map(|_| rng.gen()).collect()
            } else {
                // mutate a valid frame: flips, truncation, extension
                let mut b = samples[rng.gen_range(0..samples.len())].clone();
                for _ in 0..rng.gen_range(1..4) {
                    match rng.gen_range(0..3) {
                        0 if !b.is_empty() => {
                            let at = rng.gen_range(0..b.len());
                            b[at] ^= 1 << rng.gen_range(0..8);
                        }
                        1 => b.truncate(rng.gen_range(0..=b.len())),
                        _ => b.push(rng.gen()),
                    }
                }
                b
            };
            if decode(&bytes).is_err() {
                rejected += 1;
            }
        }
    }))
    .is_ok();
    outcome(
        survived && round_trips == 10_000,
        format!(
            "{fuzzed} fuzzed inputs decoded without panic ({rejected} rejected), {round_trips}/10000 round trips exact"
        ),
    )
}

fn c11_transport() -> Outcome {
    let run = |kind: TransportKind| {
        let mut cfg = small_config(2, 20);
        cfg.cluster.transport = kind;
        cfg.seed = 1111;
        run_local(cfg).expect("transport run")
    };
    let a = run(TransportKind::InProc);
    let b = run(TransportKind::Tcp);
    outcome(
        a.checksum == b.checksum && a.global_step == 20 && b.global_step == 20,
        format!(
            "after 20 steps inproc {:016x}, tcp {:016x}",
            a.checksum, b.checksum
        ),
    )
}

fn c12_eps_sweep() -> Outcome {
    let dir = tempdir();
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/eps_sweep.sh");
    let status = Command::new("bash")
        .arg(&script)
        .env("BIN", env!("CARGO_BIN_EXE_dba3c"))
        .env("STEPS", "30")
        .env("OUT_DIR", dir.path())
        .output()
        .expect("running the sweep script");
    if !status.status.success() {
        return outcome(
            false,
            format!("sweep script failed: {}", String::from_utf8_lossy(&status.stderr)),
        );
    }
    let mut parsed = Vec::new();
    for tag in ["1e-3", "1e-8"] {
        let path = dir.path().join(format!("eps_{tag}.csv"));
        match read_csv(&path) {
            Ok(rows) if !rows.is_empty() && rows.last().unwrap().step == 30 => {
                parsed.push(format!("eps_{tag}.csv {} rows", rows.len()))
            }
            Ok(rows) => return outcome(false, format!("{} has {} rows", path.display(), rows.len())),
            Err(e) => return outcome(false, format!("{e}")),
        }
    }
    outcome(true, format!("both runs completed at effective batch 512: {}", parsed.join(", ")))
}
