//! Gradient-descent update rules.
//!
//! Each rule comes in two shapes: a pure transition
//! (`params, grad, state -> params', state'`) and an in-place slice version
//! used by the chief and the parameter-server shards. Both share one code
//! path so they cannot drift apart.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nncore::{NetGradient, ParamVector};
use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("length mismatch: {params} parameters, {grad} gradient entries, {state} state entries")]
    Length {
        params: usize,
        grad: usize,
        state: usize,
    },
    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("optimizer variant {expected:?} required, config selects {actual:?}")]
    WrongVariant {
        expected: OptimVariant,
        actual: OptimVariant,
    },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimVariant {
    Sgd,
    AdamCanonical,
    AdamFast,
    RmsProp,
}

impl OptimVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimVariant::Sgd => "sgd",
            OptimVariant::AdamCanonical => "adam",
            OptimVariant::AdamFast => "adam-fast",
            OptimVariant::RmsProp => "rmsprop",
        }
    }
}

impl std::str::FromStr for OptimVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimVariant::Sgd),
            "adam" | "adam-canonical" => Ok(OptimVariant::AdamCanonical),
            "adam-fast" => Ok(OptimVariant::AdamFast),
            "rmsprop" => Ok(OptimVariant::RmsProp),
            other => Err(format!(
                "unknown optimizer '{other}' (expected sgd|adam|adam-fast|rmsprop)"
            )),
        }
    }
}

/// `epsilon` is only read by the canonical Adam form and RMSProp,
/// `epsilon_hat` only by the fast form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epsilon_hat: f64,
    pub rho: f64,
    pub variant: OptimVariant,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            eta: 0.001,
            beta1: 0.8,
            beta2: 0.75,
            epsilon: 1e-8,
            epsilon_hat: 1e-8,
            rho: 0.9,
            variant: OptimVariant::AdamCanonical,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(OptimError::InvalidConfig(format!(
                "eta must be > 0, got {}",
                self.eta
            )));
        }
        if !unit(self.beta1) || !unit(self.beta2) || !unit(self.rho) {
            return Err(OptimError::InvalidConfig(
                "beta1, beta2 and rho must lie in [0, 1)".into(),
            ));
        }
        if !(self.epsilon >= 0.0 && self.epsilon_hat >= 0.0) {
            return Err(OptimError::InvalidConfig(
                "epsilon and epsilon_hat must be >= 0".into(),
            ));
        }
        Ok(())
    }

    fn require(&self, expected: OptimVariant) -> Result<(), OptimError> {
        if self.variant == expected {
            Ok(())
        } else {
            Err(OptimError::WrongVariant {
                expected,
                actual: self.variant,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState<T> {
    pub v: Vec<T>,
}

impl<T: Real> RmsPropState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            v: vec![T::zero(); len],
        }
    }
}

fn check_grad<T: Real>(params: usize, grad: &[T], state: usize) -> Result<(), OptimError> {
    if params != grad.len() || state != grad.len() {
        return Err(OptimError::Length {
            params,
            grad: grad.len(),
            state,
        });
    }
    match grad.iter().position(|g| !g.is_finite()) {
        Some(index) => Err(OptimError::NonFiniteGradient { index }),
        None => Ok(()),
    }
}

pub fn sgd_in_place<T: Real>(
    params: &mut [T],
    grad: &[T],
    cfg: &OptimConfig,
) -> Result<(), OptimError> {
    check_grad(params.len(), grad, grad.len())?;
    let eta = T::of(cfg.eta);
    for (p, &g) in params.iter_mut().zip(grad) {
        *p = *p - eta * g;
    }
    Ok(())
}

/// `num / den` with 0/0 taken as 0: a coordinate that has never seen a
/// non-zero gradient does not move even when the stability constant is 0.
fn ratio<T: Real>(num: T, den: T) -> T {
    if num == T::zero() {
        T::zero()
    } else {
        num / den
    }
}

fn update_moments<T: Real>(state: &mut AdamState<T>, grad: &[T], cfg: &OptimConfig) {
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    state.t += 1;
    for ((m, v), &g) in state.m.iter_mut().zip(state.v.iter_mut()).zip(grad) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
    }
}

fn powi<T: Real>(base: f64, t: u64) -> T {
    T::of(base).powi(t.min(i32::MAX as u64) as i32)
}

pub fn adam_canonical_in_place<T: Real>(
    params: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    cfg: &OptimConfig,
) -> Result<(), OptimError> {
    check_grad(params.len(), grad, state.m.len().min(state.v.len()))?;
    update_moments(state, grad, cfg);
    let one = T::one();
    let c1 = one - powi::<T>(cfg.beta1, state.t);
    let c2 = one - powi::<T>(cfg.beta2, state.t);
    let eta = T::of(cfg.eta);
    let eps = T::of(cfg.epsilon);
    for ((p, &m), &v) in params.iter_mut().zip(&state.m).zip(&state.v) {
        let m_hat = m / c1;
        let v_hat = v / c2;
        *p = *p - eta * ratio(m_hat, v_hat.sqrt() + eps);
    }
    Ok(())
}

/// The bias corrections are folded into a per-step rate, so `epsilon_hat`
/// acts on the uncorrected second moment.
pub fn adam_fast_in_place<T: Real>(
    params: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    cfg: &OptimConfig,
) -> Result<(), OptimError> {
    check_grad(params.len(), grad, state.m.len().min(state.v.len()))?;
    update_moments(state, grad, cfg);
    let one = T::one();
    let eta_t = T::of(cfg.eta) * (one - powi::<T>(cfg.beta2, state.t)).sqrt()
        / (one - powi::<T>(cfg.beta1, state.t));
    let eps = T::of(cfg.epsilon_hat);
    for ((p, &m), &v) in params.iter_mut().zip(&state.m).zip(&state.v) {
        *p = *p - eta_t * ratio(m, v.sqrt() + eps);
    }
    Ok(())
}

pub fn rmsprop_in_place<T: Real>(
    params: &mut [T],
    grad: &[T],
    state: &mut RmsPropState<T>,
    cfg: &OptimConfig,
) -> Result<(), OptimError> {
    check_grad(params.len(), grad, state.v.len())?;
    let rho = T::of(cfg.rho);
    let eta = T::of(cfg.eta);
    let eps = T::of(cfg.epsilon);
    let one = T::one();
    for ((p, v), &g) in params.iter_mut().zip(state.v.iter_mut()).zip(grad) {
        *v = rho * *v + (one - rho) * g * g;
        *p = *p - eta * ratio(g, v.sqrt() + eps);
    }
    Ok(())
}

pub fn sgd_step<T: Real>(
    params: &ParamVector<T>,
    grad: &NetGradient<T>,
    cfg: &OptimConfig,
) -> Result<ParamVector<T>, OptimError> {
    let mut out = params.as_slice().to_vec();
    sgd_in_place(&mut out, grad.as_slice(), cfg)?;
    Ok(ParamVector::from_vec(out))
}

pub fn adam_step_canonical<T: Real>(
    params: &ParamVector<T>,
    grad: &NetGradient<T>,
    state: &AdamState<T>,
    cfg: &OptimConfig,
) -> Result<(ParamVector<T>, AdamState<T>), OptimError> {
    cfg.require(OptimVariant::AdamCanonical)?;
    let mut out = params.as_slice().to_vec();
    let mut next = state.clone();
    adam_canonical_in_place(&mut out, grad.as_slice(), &mut next, cfg)?;
    Ok((ParamVector::from_vec(out), next))
}

pub fn adam_step_fast<T: Real>(
    params: &ParamVector<T>,
    grad: &NetGradient<T>,
    state: &AdamState<T>,
    cfg: &OptimConfig,
) -> Result<(ParamVector<T>, AdamState<T>), OptimError> {
    cfg.require(OptimVariant::AdamFast)?;
    let mut out = params.as_slice().to_vec();
    let mut next = state.clone();
    adam_fast_in_place(&mut out, grad.as_slice(), &mut next, cfg)?;
    Ok((ParamVector::from_vec(out), next))
}

pub fn rmsprop_step<T: Real>(
    params: &ParamVector<T>,
    grad: &NetGradient<T>,
    state: &RmsPropState<T>,
    cfg: &OptimConfig,
) -> Result<(ParamVector<T>, RmsPropState<T>), OptimError> {
    cfg.require(OptimVariant::RmsProp)?;
    let mut out = params.as_slice().to_vec();
    let mut next = state.clone();
    rmsprop_in_place(&mut out, grad.as_slice(), &mut next, cfg)?;
    Ok((ParamVector::from_vec(out), next))
}

/// Multiplies the learning rate by `k` (batch grown by `k`).
pub fn linear_scale_lr(eta: f64, k: f64) -> Result<f64, OptimError> {
    if !(k > 0.0) {
        return Err(OptimError::InvalidConfig(format!(
            "learning-rate scale factor must be > 0, got {k}"
        )));
    }
    Ok(eta * k)
}

/// Optimizer state for whichever variant a config selects. Owned by exactly
/// one updater: the chief in sync mode, one shard server in async mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer<T> {
    Sgd,
    Adam(AdamState<T>),
    RmsProp(RmsPropState<T>),
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: &OptimConfig, len: usize) -> Self {
        match cfg.variant {
            OptimVariant::Sgd => Optimizer::Sgd,
            OptimVariant::AdamCanonical | OptimVariant::AdamFast => {
                Optimizer::Adam(AdamState::new(len))
            }
            OptimVariant::RmsProp => Optimizer::RmsProp(RmsPropState::new(len)),
        }
    }

    pub fn step(
        &mut self,
        params: &mut [T],
        grad: &[T],
        cfg: &OptimConfig,
    ) -> Result<(), OptimError> {
        match (self, cfg.variant) {
            (Optimizer::Sgd, OptimVariant::Sgd) => sgd_in_place(params, grad, cfg),
            (Optimizer::Adam(s), OptimVariant::AdamCanonical) => {
                adam_canonical_in_place(params, grad, s, cfg)
            }
            (Optimizer::Adam(s), OptimVariant::AdamFast) => adam_fast_in_place(params, grad, s, cfg),
            (Optimizer::RmsProp(s), OptimVariant::RmsProp) => rmsprop_in_place(params, grad, s, cfg),
            (_, actual) => Err(OptimError::InvalidConfig(format!(
                "optimizer state does not match variant {actual:?}"
            ))),
        }
    }

    /// Step counter for Adam, `None` for stateless or counter-free rules.
    pub fn steps(&self) -> Option<u64> {
        match self {
            Optimizer::Adam(s) => Some(s.t),
            _ => None,
        }
    }
}
