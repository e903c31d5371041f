//! Actor-critic training machinery: n-step returns, the policy/value/entropy
//! loss and its gradient, and mini-batch assembly from simulator output.

mod queue;
mod rollout;

pub use queue::{assemble_batch, DataPointQueue};
pub use rollout::RolloutCollector;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Observation;
use crate::nncore::{backward, forward, NetArch, NetError, NetGradient, ParamVector};
use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum AlgoError {
    #[error("empty mini-batch")]
    EmptyBatch,
    #[error("data-point {index}: action {action} out of range for {actions} actions")]
    BadAction {
        index: usize,
        action: usize,
        actions: usize,
    },
    #[error("data-point {index}: non-finite return")]
    NonFiniteReturn { index: usize },
    #[error("invalid algorithm config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    pub gamma: f64,
    pub n_step: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            n_step: 5,
            value_coef: 0.5,
            entropy_coef: 0.01,
        }
    }
}

impl AlgoConfig {
    pub fn validate(&self) -> Result<(), AlgoError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(AlgoError::InvalidConfig(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.n_step < 1 {
            return Err(AlgoError::InvalidConfig("n_step must be >= 1".into()));
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return Err(AlgoError::InvalidConfig(
                "loss coefficients must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub obs: Observation,
    pub action: usize,
    pub n_step_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    points: Vec<DataPoint>,
}

impl MiniBatch {
    pub fn new(points: Vec<DataPoint>) -> Self {
        Self { points }
    }

    /// Concatenates batches in the given order.
    pub fn concat<'a>(batches: impl IntoIterator<Item = &'a MiniBatch>) -> Self {
        Self {
            points: batches
                .into_iter()
                .flat_map(|b| b.points.iter().cloned())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn into_points(self) -> Vec<DataPoint> {
        self.points
    }
}

/// `R_i = sum_{j>=i} gamma^(j-i) r_j + gamma^(L-i) bootstrap`.
pub fn n_step_returns(rewards: &[f64], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossStats {
    pub mean_entropy: f64,
    pub mean_advantage: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Batch mean of the combined loss.
    pub loss: f64,
    /// Batch mean gradient.
    pub grad: NetGradient<T>,
    pub stats: LossStats,
}

struct Partial<T> {
    grad: NetGradient<T>,
    loss: f64,
    entropy: f64,
    advantage: f64,
    policy: f64,
    value: f64,
}

fn sum_over<T: Real>(
    arch: &NetArch,
    params: &ParamVector<T>,
    points: &[DataPoint],
    cfg: &AlgoConfig,
    offset: usize,
) -> Result<Partial<T>, AlgoError> {
    let a = arch.actions();
    let mut obs = Vec::with_capacity(points.len() * arch.input_dim());
    for (i, dp) in points.iter().enumerate() {
        if dp.action >= a {
            return Err(AlgoError::BadAction {
                index: offset + i,
                action: dp.action,
                actions: a,
            });
        }
        if !dp.n_step_return.is_finite() {
            return Err(AlgoError::NonFiniteReturn { index: offset + i });
        }
        obs.extend(dp.obs.as_slice().iter().map(|&x| T::of(x as f64)));
    }
    let trace = forward(arch, params, &obs, points.len())?;
    let probs = trace.probs();
    let log_probs = trace.log_probs();
    let values = trace.values();

    let beta_v = T::of(cfg.value_coef);
    let beta_e = T::of(cfg.entropy_coef);
    let two = T::of(2.0);
    let mut dlogits = vec![T::zero(); points.len() * a];
    let mut dvalues = vec![T::zero(); points.len()];
    let mut out = Partial {
        grad: NetGradient::zeros(0),
        loss: 0.0,
        entropy: 0.0,
        advantage: 0.0,
        policy: 0.0,
        value: 0.0,
    };
    for (b, dp) in points.iter().enumerate() {
        let p = &probs[b * a..(b + 1) * a];
        let lp = &log_probs[b * a..(b + 1) * a];
        let ret = T::of(dp.n_step_return);
        let adv = ret - values[b];
        let entropy = -p.iter().zip(lp).map(|(&pi, &li)| pi * li).sum::<T>();

        let policy_term = -lp[dp.action] * adv;
        let value_term = beta_v * adv * adv;
        out.loss += (policy_term + value_term - beta_e * entropy).f64();
        out.policy += policy_term.f64();
        out.value += value_term.f64();
        out.entropy += entropy.f64();
        out.advantage += adv.f64();

        let dz = &mut dlogits[b * a..(b + 1) * a];
        for k in 0..a {
            let onehot = if k == dp.action { T::one() } else { T::zero() };
            dz[k] = adv * (p[k] - onehot) + beta_e * p[k] * (lp[k] + entropy);
        }
        dvalues[b] = -two * beta_v * adv;
    }
    out.grad = backward(arch, params, &trace, &dlogits, &dvalues)?;
    Ok(out)
}

fn finish<T: Real>(mut total: Partial<T>, n: usize) -> LossOutput<T> {
    let inv = T::one() / T::of(n as f64);
    total.grad.scale(inv);
    let nf = n as f64;
    LossOutput {
        loss: total.loss / nf,
        grad: total.grad,
        stats: LossStats {
            mean_entropy: total.entropy / nf,
            mean_advantage: total.advantage / nf,
            policy_loss: total.policy / nf,
            value_loss: total.value / nf,
        },
    }
}

/// Per data-point loss `-log pi(a|s) A + beta_v (R - V)^2 - beta_e H(pi)`
/// with `A = R - V` held constant in the policy term. Loss and gradient are
/// batch means.
pub fn loss_and_grad<T: Real>(
    arch: &NetArch,
    params: &ParamVector<T>,
    batch: &MiniBatch,
    cfg: &AlgoConfig,
) -> Result<LossOutput<T>, AlgoError> {
    if batch.is_empty() {
        return Err(AlgoError::EmptyBatch);
    }
    let total = sum_over(arch, params, batch.points(), cfg, 0)?;
    Ok(finish(total, batch.len()))
}

/// Same result as [`loss_and_grad`], with the batch split into contiguous
/// chunks evaluated on `threads` scoped threads. Chunk sums are reduced in
/// chunk order, so the result depends only on the inputs and `threads`.
pub fn loss_and_grad_threads<T: Real>(
    arch: &NetArch,
    params: &ParamVector<T>,
    batch: &MiniBatch,
    cfg: &AlgoConfig,
    threads: usize,
) -> Result<LossOutput<T>, AlgoError> {
    let threads = threads.clamp(1, batch.len().max(1));
    if threads == 1 {
        return loss_and_grad(arch, params, batch, cfg);
    }
    if batch.is_empty() {
        return Err(AlgoError::EmptyBatch);
    }
    let chunk = batch.len().div_ceil(threads);
    let partials: Vec<Result<Partial<T>, AlgoError>> = std::thread::scope(|s| {
        let handles: Vec<_> = batch
            .points()
            .chunks(chunk)
            .enumerate()
            .map(|(i, pts)| s.spawn(move || sum_over(arch, params, pts, cfg, i * chunk)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gradient thread panicked"))
            .collect()
    });
    let mut iter = partials.into_iter();
    let mut total = iter.next().expect("at least one chunk")?;
    for p in iter {
        let p = p?;
        total.grad.add_assign(&p.grad);
        total.loss += p.loss;
        total.entropy += p.entropy;
        total.advantage += p.advantage;
        total.policy += p.policy;
        total.value += p.value;
    }
    Ok(finish(total, batch.len()))
}

/// Inverse-CDF draw from a probability row given `u` uniform in `[0, 1)`.
pub fn sample_action<T: Real>(probs: &[T], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.f64();
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Argmax with ties going to the lowest index.
pub fn greedy_action<T: Real>(probs: &[T]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
