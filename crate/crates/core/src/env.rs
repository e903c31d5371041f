//! Catch: a ball falls one row per step and the agent slides a one-cell
//! paddle along the bottom row. Reward is +1 for a catch and -1 for a miss,
//! paid on the final step.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("step called on a terminal state")]
    Terminal,
    #[error("action index {0} out of range (expected 0..3)")]
    BadAction(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub frame_hist: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            grid_h: 10,
            grid_w: 10,
            frame_hist: 2,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.grid_h < 2 {
            return Err(EnvError::InvalidConfig("grid_h must be >= 2".into()));
        }
        if self.grid_w < 3 {
            return Err(EnvError::InvalidConfig("grid_w must be >= 3".into()));
        }
        if self.frame_hist < 1 {
            return Err(EnvError::InvalidConfig("frame_hist must be >= 1".into()));
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Network input width: one binary frame per history slot.
    pub fn obs_len(&self) -> usize {
        self.frame_len() * self.frame_hist
    }

    pub fn episode_len(&self) -> usize {
        self.grid_h - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Left = 0,
    Stay = 1,
    Right = 2,
}

impl Action {
    pub const COUNT: usize = 3;

    pub fn from_index(i: usize) -> Result<Self, EnvError> {
        match i {
            0 => Ok(Action::Left),
            1 => Ok(Action::Stay),
            2 => Ok(Action::Right),
            other => Err(EnvError::BadAction(other)),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> isize {
        self as isize - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CatchState {
    pub ball_row: usize,
    pub ball_col: usize,
    pub paddle_col: usize,
    pub step_idx: usize,
}

impl CatchState {
    pub fn is_terminal(&self, cfg: &EnvConfig) -> bool {
        self.ball_row == cfg.grid_h - 1
    }
}

pub fn reset<R: Rng>(cfg: &EnvConfig, rng: &mut R) -> CatchState {
    CatchState {
        ball_row: 0,
        ball_col: rng.gen_range(0..cfg.grid_w),
        paddle_col: cfg.grid_w / 2,
        step_idx: 0,
    }
}

/// Returns the successor state, the reward, and whether the episode ended.
pub fn step(
    cfg: &EnvConfig,
    state: &CatchState,
    action: Action,
) -> Result<(CatchState, f64, bool), EnvError> {
    if state.is_terminal(cfg) {
        return Err(EnvError::Terminal);
    }
    let paddle = (state.paddle_col as isize + action.delta()).clamp(0, cfg.grid_w as isize - 1);
    let next = CatchState {
        ball_row: state.ball_row + 1,
        ball_col: state.ball_col,
        paddle_col: paddle as usize,
        step_idx: state.step_idx + 1,
    };
    let done = next.is_terminal(cfg);
    let reward = match (done, next.ball_col == next.paddle_col) {
        (false, _) => 0.0,
        (true, true) => 1.0,
        (true, false) => -1.0,
    };
    Ok((next, reward, done))
}

/// One binary frame: 1 at the ball cell and the paddle cell.
pub fn render(cfg: &EnvConfig, state: &CatchState) -> Vec<f32> {
    let mut frame = vec![0.0; cfg.frame_len()];
    frame[state.ball_row * cfg.grid_w + state.ball_col] = 1.0;
    frame[(cfg.grid_h - 1) * cfg.grid_w + state.paddle_col] = 1.0;
    frame
}

/// Flat stacked observation, oldest frame first and the current frame last.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f32>);

impl Observation {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Stacks up to `frame_hist - 1` previous frames (oldest first) and the
/// current frame. Missing history at episode start is zero-filled.
pub fn observe(cfg: &EnvConfig, state: &CatchState, history: &[Vec<f32>]) -> Observation {
    let keep = cfg.frame_hist - 1;
    let fl = cfg.frame_len();
    let mut out = vec![0.0; cfg.obs_len()];
    let used = &history[history.len().saturating_sub(keep)..];
    let pad = keep - used.len();
    for (slot, frame) in used.iter().enumerate() {
        out[(pad + slot) * fl..(pad + slot + 1) * fl].copy_from_slice(frame);
    }
    out[keep * fl..].copy_from_slice(&render(cfg, state));
    Observation(out)
}

/// One simulator: environment state, its own rng stream, and the frame
/// history needed to build stacked observations.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: EnvConfig,
    state: CatchState,
    rng: ChaCha8Rng,
    history: VecDeque<Vec<f32>>,
    episode_return: f64,
}

impl Simulator {
    pub fn new(cfg: EnvConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = reset(&cfg, &mut rng);
        Self {
            cfg,
            state,
            rng,
            history: VecDeque::with_capacity(cfg.frame_hist),
            episode_return: 0.0,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &CatchState {
        &self.state
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn observation(&self) -> Observation {
        let hist: Vec<Vec<f32>> = self.history.iter().cloned().collect();
        observe(&self.cfg, &self.state, &hist)
    }

    /// Advances one step. On episode end the simulator resets itself and
    /// the finished episode's total reward is returned alongside.
    pub fn step(&mut self, action: Action) -> Result<SimStep, EnvError> {
        let (next, reward, done) = step(&self.cfg, &self.state, action)?;
        self.episode_return += reward;
        if done {
            let finished = self.episode_return;
            self.episode_return = 0.0;
            self.history.clear();
            self.state = reset(&self.cfg, &mut self.rng);
            return Ok(SimStep {
                reward,
                done: true,
                episode_return: Some(finished),
            });
        }
        if self.cfg.frame_hist > 1 {
            if self.history.len() == self.cfg.frame_hist - 1 {
                self.history.pop_front();
            }
            self.history.push_back(render(&self.cfg, &self.state));
        }
        self.state = next;
        Ok(SimStep {
            reward,
            done: false,
            episode_return: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimStep {
    pub reward: f64,
    pub done: bool,
    pub episode_return: Option<f64>,
}

/// Hand-written policy that slides the paddle toward the ball column.
pub fn chase_ball(state: &CatchState) -> Action {
    use std::cmp::Ordering::*;
    match state.ball_col.cmp(&state.paddle_col) {
        Less => Action::Left,
        Equal => Action::Stay,
        Greater => Action::Right,
    }
}
