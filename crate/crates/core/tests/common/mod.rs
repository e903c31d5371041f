#![allow(dead_code)]

use std::net::TcpListener;

use dba3c::algo::{loss_and_grad, MiniBatch, RolloutCollector};
use dba3c::nncore::{init_params, ParamVector};
use dba3c::optim::Optimizer;
use dba3c::real::Precision;
use dba3c::runtime::{worker_seed, Mode, TrainConfig};

/// Small sync cluster config that trains quickly without evaluation.
pub fn small_config(n: usize, steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.cluster.n = n;
    cfg.cluster.ps = 2;
    cfg.cluster.mode = Mode::Sync;
    cfg.hidden = 32;
    cfg.bs = 16;
    cfg.steps = steps;
    cfg.eval_interval = 0;
    cfg.log_interval = 10;
    cfg.seed = 7;
    cfg
}

pub fn double(mut cfg: TrainConfig) -> TrainConfig {
    cfg.precision = Precision::Double;
    cfg
}

/// One process, one network: every step gathers `bs` points from each of
/// `n` rollout streams seeded like the cluster workers, concatenates them in
/// worker order and takes one optimizer step on the combined batch.
pub fn monolithic_trajectory(cfg: &TrainConfig) -> Vec<Vec<f64>> {
    let arch = cfg.arch().unwrap();
    let n = cfg.cluster.n;
    let mut theta = init_params::<f64>(&arch, cfg.seed);
    let mut collectors: Vec<RolloutCollector> = (0..n)
        .map(|w| RolloutCollector::new(cfg.env, cfg.algo, cfg.n_sim, worker_seed(cfg.seed, w as u32)))
        .collect();
    let mut opt = Optimizer::<f64>::new(&cfg.optim, theta.len());
    let mut traj = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let batches: Vec<MiniBatch> = collectors
            .iter_mut()
            .map(|c| c.collect(&arch, &theta, cfg.bs, |_| {}).unwrap())
            .collect();
        let big = MiniBatch::concat(&batches);
        let grad = loss_and_grad(&arch, &theta, &big, &cfg.algo).unwrap().grad.into_vec();
        let mut p = theta.into_vec();
        opt.step(&mut p, &grad, &cfg.optim).unwrap();
        theta = ParamVector::from_vec(p);
        traj.push(theta.to_f64());
    }
    traj
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A localhost port that was free a moment ago.
pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}
