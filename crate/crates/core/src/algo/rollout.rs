use rand::Rng;

use super::{n_step_returns, sample_action, AlgoConfig, AlgoError, DataPoint, DataPointQueue, MiniBatch};
use crate::env::{Action, EnvConfig, Observation, Simulator};
use crate::nncore::{forward, NetArch, ParamVector};
use crate::real::Real;

/// Experience collection for one worker.
///
/// All simulators advance in lockstep: one batched policy query over every
/// simulator's current observation, then one environment step each, in
/// simulator order. A simulator's pending segment is flushed into the queue
/// once it holds `n_step` transitions (bootstrapped from the value of the
/// following state) or its episode ends (bootstrap 0). Points left over
/// after a batch is taken carry into the next call.
#[derive(Debug)]
pub struct RolloutCollector {
    env: EnvConfig,
    algo: AlgoConfig,
    sims: Vec<Simulator>,
    segments: Vec<Vec<(Observation, usize, f64)>>,
    queue: DataPointQueue,
}

impl RolloutCollector {
    /// Simulator `i` is seeded with `seed ^ i`.
    pub fn new(env: EnvConfig, algo: AlgoConfig, n_sim: usize, seed: u64) -> Self {
        let sims = (0..n_sim as u64).map(|i| Simulator::new(env, seed ^ i)).collect();
        Self {
            env,
            algo,
            sims,
            segments: vec![Vec::new(); n_sim],
            queue: DataPointQueue::new(),
        }
    }

    pub fn n_sim(&self) -> usize {
        self.sims.len()
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    /// Runs the simulators under `params` until `bs` data-points are queued
    /// and returns the oldest `bs` of them. `on_episode` receives the total
    /// reward of every episode finished along the way.
    pub fn collect<T: Real>(
        &mut self,
        arch: &NetArch,
        params: &ParamVector<T>,
        bs: usize,
        mut on_episode: impl FnMut(f64),
    ) -> Result<MiniBatch, AlgoError> {
        while self.queue.len() < bs {
            self.round(arch, params, &mut on_episode)?;
        }
        Ok(super::assemble_batch(&self.queue, bs))
    }

    fn round<T: Real>(
        &mut self,
        arch: &NetArch,
        params: &ParamVector<T>,
        on_episode: &mut impl FnMut(f64),
    ) -> Result<(), AlgoError> {
        let n = self.sims.len();
        let obs: Vec<Observation> = self.sims.iter().map(Simulator::observation).collect();
        let mut input = Vec::with_capacity(n * self.env.obs_len());
        for o in &obs {
            input.extend(o.as_slice().iter().map(|&x| T::of(x as f64)));
        }
        let trace = forward(arch, params, &input, n)?;
        let a = arch.actions();
        for (i, o) in obs.into_iter().enumerate() {
            if self.segments[i].len() >= self.algo.n_step {
                self.flush(i, trace.values()[i].f64());
            }
            let u: f64 = self.sims[i].rng().gen();
            let action = sample_action(&trace.probs()[i * a..(i + 1) * a], u);
            let step = self.sims[i].step(Action::from_index(action)?)?;
            self.segments[i].push((o, action, step.reward));
            if step.done {
                self.flush(i, 0.0);
            }
            if let Some(ret) = step.episode_return {
                on_episode(ret);
            }
        }
        Ok(())
    }

    fn flush(&mut self, sim: usize, bootstrap: f64) {
        let segment = std::mem::take(&mut self.segments[sim]);
        let rewards: Vec<f64> = segment.iter().map(|s| s.2).collect();
        let returns = n_step_returns(&rewards, bootstrap, self.algo.gamma);
        self.queue.extend(
            segment
                .into_iter()
                .zip(returns)
                .map(|((obs, action, _), n_step_return)| DataPoint {
                    obs,
                    action,
                    n_step_return,
                }),
        );
    }
}
