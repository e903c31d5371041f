//! Command-line configuration. Flag names follow the hyperparameter
//! symbols: `--n`, `--c`, `--lr`, `--bs`, `--ps`, `--n-sim`, `--epsilon`,
//! `--beta1`, `--beta2`.

use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use thiserror::Error;

use crate::algo::AlgoConfig;
use crate::env::EnvConfig;
use crate::optim::{linear_scale_lr, OptimConfig, OptimVariant};
use crate::real::Precision;
use crate::runtime::{ClusterSpec, Mode, Role, TcpAddresses, TrainConfig, TransportKind};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Usage(#[from] clap::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(e) => e.exit_code(),
            CliError::Invalid(_) => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleKind {
    Ps,
    Chief,
    Worker,
}

#[derive(Debug, Clone, Parser)]
#[command(name = "dba3c", version, about = "Distributed batch A3C on Catch with sharded parameter servers")]
struct Args {
    /// Workers.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Threads per worker.
    #[arg(long, visible_alias = "threads", default_value_t = 2)]
    c: usize,
    /// Learning rate (eta).
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Data-points per worker gradient.
    #[arg(long, default_value_t = 32)]
    bs: usize,
    /// Parameter servers.
    #[arg(long, default_value_t = 4)]
    ps: usize,
    /// Simulators per worker.
    #[arg(long, default_value_t = 10)]
    n_sim: usize,
    /// Adam epsilon (canonical form).
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    /// Adam epsilon-hat (fast form).
    #[arg(long, default_value_t = 1e-8)]
    epsilon_hat: f64,
    #[arg(long, default_value_t = 0.8)]
    beta1: f64,
    #[arg(long, default_value_t = 0.75)]
    beta2: f64,
    /// RMSProp decay.
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    /// sgd, adam, adam-fast, or rmsprop.
    #[arg(long, default_value = "adam")]
    optimizer: OptimVariant,
    /// Multiply the learning rate by this factor.
    #[arg(long)]
    lr_scale: Option<f64>,
    #[arg(long, default_value = "sync")]
    mode: Mode,
    /// Fraction of worker gradients needed per sync update.
    #[arg(long, default_value_t = 1.0)]
    agg_frac: f64,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    frame_hist: usize,
    #[arg(long, default_value_t = 10)]
    grid_h: usize,
    #[arg(long, default_value_t = 10)]
    grid_w: usize,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, default_value_t = 5)]
    n_step: usize,
    #[arg(long, default_value_t = 0.5)]
    value_coef: f64,
    #[arg(long, default_value_t = 0.01)]
    entropy_coef: f64,
    /// Global update limit.
    #[arg(long, default_value_t = 20_000)]
    steps: u64,
    /// Stop once an evaluation reaches this mean score.
    #[arg(long)]
    target_score: Option<f64>,
    /// Updates between evaluations (0 disables).
    #[arg(long, default_value_t = 1000)]
    eval_interval: u64,
    #[arg(long, default_value_t = 50)]
    eval_games: usize,
    /// Updates between metrics rows.
    #[arg(long, default_value_t = 100)]
    log_interval: u64,
    #[arg(long, env = "DDRL_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "inproc")]
    transport: TransportKind,
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    /// JSON-lines log of staleness records and drops.
    #[arg(long)]
    events: Option<PathBuf>,
    /// single or double.
    #[arg(long, default_value = "single")]
    precision: Precision,
    /// Run one role of a multi-process TCP cluster.
    #[arg(long, value_enum)]
    role: Option<RoleKind>,
    /// Worker id or shard index for --role.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Listen address for --role ps/chief.
    #[arg(long)]
    listen: Option<String>,
    /// Comma-separated parameter-server addresses.
    #[arg(long, value_delimiter = ',')]
    ps_addrs: Vec<String>,
    #[arg(long)]
    chief_addr: Option<String>,
    /// Print the resolved configuration as flags and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Effective training configuration (`optim.eta` includes `lr_scale`).
    pub train: TrainConfig,
    /// Learning rate as given, before scaling.
    pub lr: f64,
    pub lr_scale: Option<f64>,
    pub role: Option<Role>,
    pub print_config: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_args(["dba3c"]).expect("defaults are valid")
    }
}

fn invalid(m: impl Into<String>) -> CliError {
    CliError::Invalid(m.into())
}

pub fn parse_args<I, S>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let a = Args::try_parse_from(argv)?;
    let eta = match a.lr_scale {
        Some(k) => linear_scale_lr(a.lr, k).map_err(|e| invalid(e.to_string()))?,
        None => a.lr,
    };
    if a.mode == Mode::Async && a.agg_frac != 1.0 {
        return Err(invalid("--agg-frac only applies to --mode sync"));
    }
    let role = match a.role {
        None => None,
        Some(kind) => {
            if a.transport != TransportKind::Tcp {
                return Err(invalid("--role requires --transport tcp"));
            }
            Some(match kind {
                RoleKind::Ps => Role::Ps {
                    index: a.index,
                    listen: a.listen.clone().ok_or_else(|| invalid("--role ps needs --listen"))?,
                },
                RoleKind::Chief => Role::Chief {
                    listen: a.listen.clone().ok_or_else(|| invalid("--role chief needs --listen"))?,
                    ps: a.ps_addrs.clone(),
                },
                RoleKind::Worker => Role::Worker {
                    id: u32::try_from(a.index).map_err(|_| invalid("worker index too large"))?,
                    chief: a.chief_addr.clone(),
                    ps: a.ps_addrs.clone(),
                },
            })
        }
    };
    let addresses = match (&a.role, a.transport, a.ps_addrs.is_empty()) {
        (None, TransportKind::Tcp, false) => Some(TcpAddresses {
            chief: a.chief_addr.clone().unwrap_or_else(|| "127.0.0.1:0".into()),
            ps: a.ps_addrs.clone(),
        }),
        _ => None,
    };
    let train = TrainConfig {
        cluster: ClusterSpec {
            n: a.n,
            c: a.c,
            ps: a.ps,
            mode: a.mode,
            agg_frac: a.agg_frac,
            transport: a.transport,
            addresses,
        },
        env: EnvConfig {
            grid_h: a.grid_h,
            grid_w: a.grid_w,
            frame_hist: a.frame_hist,
            seed: a.seed,
        },
        algo: AlgoConfig {
            gamma: a.gamma,
            n_step: a.n_step,
            value_coef: a.value_coef,
            entropy_coef: a.entropy_coef,
        },
        optim: OptimConfig {
            eta,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
            epsilon_hat: a.epsilon_hat,
            rho: a.rho,
            variant: a.optimizer,
        },
        hidden: a.hidden,
        bs: a.bs,
        n_sim: a.n_sim,
        steps: a.steps,
        target_score: a.target_score,
        eval_interval: a.eval_interval,
        eval_games: a.eval_games,
        log_interval: a.log_interval,
        seed: a.seed,
        precision: a.precision,
        out: Some(a.out.clone()),
        event_log: a.events.clone(),
        record_trajectory: false,
        worker_delays: Vec::new(),
    };
    train.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(RunConfig {
        train,
        lr: a.lr,
        lr_scale: a.lr_scale,
        role,
        print_config: a.print_config,
    })
}

impl RunConfig {
    /// Flags that parse back to this configuration (minus `--print-config`).
    pub fn to_args(&self) -> Vec<String> {
        let t = &self.train;
        let mut v: Vec<String> = Vec::new();
        let mut put = |k: &str, val: String| {
            v.push(format!("--{k}"));
            v.push(val);
        };
        put("n", t.cluster.n.to_string());
        put("c", t.cluster.c.to_string());
        put("lr", self.lr.to_string());
        put("bs", t.bs.to_string());
        put("ps", t.cluster.ps.to_string());
        put("n-sim", t.n_sim.to_string());
        put("epsilon", t.optim.epsilon.to_string());
        put("epsilon-hat", t.optim.epsilon_hat.to_string());
        put("beta1", t.optim.beta1.to_string());
        put("beta2", t.optim.beta2.to_string());
        put("rho", t.optim.rho.to_string());
        put("optimizer", t.optim.variant.as_str().to_string());
        if let Some(k) = self.lr_scale {
            put("lr-scale", k.to_string());
        }
        put("mode", t.cluster.mode.as_str().to_string());
        put("agg-frac", t.cluster.agg_frac.to_string());
        put("hidden", t.hidden.to_string());
        put("frame-hist", t.env.frame_hist.to_string());
        put("grid-h", t.env.grid_h.to_string());
        put("grid-w", t.env.grid_w.to_string());
        put("gamma", t.algo.gamma.to_string());
        put("n-step", t.algo.n_step.to_string());
        put("value-coef", t.algo.value_coef.to_string());
        put("entropy-coef", t.algo.entropy_coef.to_string());
        put("steps", t.steps.to_string());
        if let Some(s) = t.target_score {
            put("target-score", s.to_string());
        }
        put("eval-interval", t.eval_interval.to_string());
        put("eval-games", t.eval_games.to_string());
        put("log-interval", t.log_interval.to_string());
        put("seed", t.seed.to_string());
        put("transport", t.cluster.transport.as_str().to_string());
        if let Some(out) = &t.out {
            put("out", out.display().to_string());
        }
        if let Some(ev) = &t.event_log {
            put("events", ev.display().to_string());
        }
        put("precision", t.precision.as_str().to_string());
        if let Some(a) = &t.cluster.addresses {
            put("chief-addr", a.chief.clone());
            put("ps-addrs", a.ps.join(","));
        }
        match &self.role {
            None => {}
            Some(Role::Ps { index, listen }) => {
                put("role", "ps".into());
                put("index", index.to_string());
                put("listen", listen.clone());
            }
            Some(Role::Chief { listen, ps }) => {
                put("role", "chief".into());
                put("listen", listen.clone());
                put("ps-addrs", ps.join(","));
            }
            Some(Role::Worker { id, chief, ps }) => {
                put("role", "worker".into());
                put("index", id.to_string());
                if let Some(c) = chief {
                    put("chief-addr", c.clone());
                }
                put("ps-addrs", ps.join(","));
            }
        }
        v
    }
}
