//! Process roles (parameter server, chief, worker), the local cluster
//! launcher, and the sync/async switch.

mod chief;
mod ps;
mod worker;

pub use chief::{ChiefCore, PushOutcome, VersionTally};
pub use worker::WorkerReport;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algo::{AlgoConfig, AlgoError};
use crate::env::{Action, EnvConfig, EnvError};
use crate::nncore::{init_params, NetArch, NetError, NetGradient, ParamVector};
use crate::optim::{OptimConfig, OptimError};
use crate::real::{checksum, Precision, Real};
use crate::shard::{make_shards, ShardError, ShardStore};
use crate::telemetry::{
    eval_run, run_collector, CollectorConfig, Event, EvalReport, Telemetry, TelemetryError,
};
use crate::transport::{
    tcp_connect, ByteCounters, ClientConn, CounterSnapshot, InProcConnector, Server,
    TransportError,
};

/// How long blocking loops wait before re-checking stop flags.
pub(crate) const POLL: Duration = Duration::from_millis(20);
/// How long a TCP client keeps retrying to reach its peer.
pub const CONNECT_WAIT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid cluster configuration: {0}")]
    InvalidSpec(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: TransportError,
    },
    #[error("{role} thread panicked")]
    Panic { role: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sync,
    Async,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Sync => "sync",
            Mode::Async => "async",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sync" => Ok(Mode::Sync),
            "async" => Ok(Mode::Async),
            other => Err(format!("unknown mode {other:?} (expected sync or async)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    InProc,
    Tcp,
}

impl TransportKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransportKind::InProc => "inproc",
            TransportKind::Tcp => "tcp",
        }
    }
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inproc" => Ok(TransportKind::InProc),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(format!("unknown transport {other:?} (expected inproc or tcp)")),
        }
    }
}

/// Fixed listen addresses for TCP mode; ephemeral localhost ports otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcpAddresses {
    pub chief: String,
    pub ps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub n: usize,
    /// Threads per worker, used for the gradient computation.
    pub c: usize,
    pub ps: usize,
    pub mode: Mode,
    pub agg_frac: f64,
    pub transport: TransportKind,
    pub addresses: Option<TcpAddresses>,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            n: 4,
            c: 2,
            ps: 4,
            mode: Mode::Sync,
            agg_frac: 1.0,
            transport: TransportKind::InProc,
            addresses: None,
        }
    }
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let bad = |m: String| Err(RuntimeError::InvalidSpec(m));
        if self.n == 0 || self.n > u32::MAX as usize {
            return bad(format!("worker count must be at least 1, got {}", self.n));
        }
        if self.c == 0 {
            return bad("threads per worker must be at least 1".into());
        }
        if self.ps == 0 {
            return bad("parameter-server count must be at least 1".into());
        }
        if !(self.agg_frac > 0.0 && self.agg_frac <= 1.0) {
            return bad(format!("agg_frac must lie in (0, 1], got {}", self.agg_frac));
        }
        if self.mode == Mode::Async && self.agg_frac != 1.0 {
            return bad("agg_frac only applies to sync mode".into());
        }
        if let Some(a) = &self.addresses {
            if self.transport != TransportKind::Tcp {
                return bad("listen addresses require the tcp transport".into());
            }
            if a.ps.len() != self.ps {
                return bad(format!("{} ps addresses for {} shards", a.ps.len(), self.ps));
            }
        }
        Ok(())
    }

    pub fn threshold(&self) -> usize {
        straggler_threshold(self.n, self.agg_frac)
    }
}

/// Full configuration of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub cluster: ClusterSpec,
    pub env: EnvConfig,
    pub algo: AlgoConfig,
    pub optim: OptimConfig,
    pub hidden: usize,
    /// Data-points per worker gradient.
    pub bs: usize,
    pub n_sim: usize,
    pub steps: u64,
    pub target_score: Option<f64>,
    /// Updates between evaluations; 0 disables periodic evaluation.
    pub eval_interval: u64,
    pub eval_games: usize,
    pub log_interval: u64,
    pub seed: u64,
    pub precision: Precision,
    pub out: Option<PathBuf>,
    pub event_log: Option<PathBuf>,
    /// Keep the parameters after every sync update in the report.
    pub record_trajectory: bool,
    /// Extra sleep per iteration for individual workers, by worker id.
    pub worker_delays: Vec<Duration>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cluster: ClusterSpec::default(),
            env: EnvConfig::default(),
            algo: AlgoConfig::default(),
            optim: OptimConfig::default(),
            hidden: 128,
            bs: 32,
            n_sim: 10,
            steps: 20_000,
            target_score: None,
            eval_interval: 1000,
            eval_games: 50,
            log_interval: 100,
            seed: 0,
            precision: Precision::Single,
            out: None,
            event_log: None,
            record_trajectory: false,
            worker_delays: Vec::new(),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rollout seed of worker `w`.
pub fn worker_seed(seed: u64, w: u32) -> u64 {
    splitmix64(seed ^ splitmix64(u64::from(w) + 1))
}

/// Seed of the evaluation stream, independent of every worker's.
pub fn eval_seed(seed: u64) -> u64 {
    splitmix64(seed ^ 0xE7A1_0000_0000_0000)
}

impl TrainConfig {
    pub fn arch(&self) -> Result<NetArch, RuntimeError> {
        Ok(NetArch::new(self.env.obs_len(), self.hidden, Action::COUNT)?)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        self.cluster.validate()?;
        self.env.validate()?;
        self.algo.validate()?;
        self.optim.validate()?;
        let arch = self.arch()?;
        if self.cluster.ps > arch.param_count() {
            return Err(RuntimeError::InvalidSpec(format!(
                "{} parameter servers for {} parameters",
                self.cluster.ps,
                arch.param_count()
            )));
        }
        if self.cluster.ps > u16::MAX as usize + 1 {
            return Err(RuntimeError::InvalidSpec("too many parameter servers".into()));
        }
        if self.bs == 0 || self.n_sim == 0 {
            return Err(RuntimeError::InvalidSpec("bs and n_sim must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(RuntimeError::InvalidSpec("steps must be at least 1".into()));
        }
        if self.target_score.is_some() && (self.eval_interval == 0 || self.eval_games == 0) {
            return Err(RuntimeError::InvalidSpec(
                "target_score needs periodic evaluation".into(),
            ));
        }
        if self.record_trajectory && self.cluster.mode == Mode::Async {
            return Err(RuntimeError::InvalidSpec(
                "trajectories are only recorded in sync mode".into(),
            ));
        }
        Ok(())
    }

    pub fn worker_delay(&self, w: u32) -> Duration {
        self.worker_delays.get(w as usize).copied().unwrap_or_default()
    }

    pub(crate) fn eval_due(&self, step: u64) -> bool {
        self.eval_interval > 0 && self.eval_games > 0 && step % self.eval_interval == 0
    }
}

/// One applied gradient as seen by the updater.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StalenessRecord {
    pub worker_id: u32,
    /// Set for per-shard async applications.
    pub shard_id: Option<u16>,
    pub base_version: u64,
    /// Version the gradient was applied against.
    pub apply_version: u64,
    pub staleness: u64,
}

impl StalenessRecord {
    pub fn new(worker_id: u32, shard_id: Option<u16>, base_version: u64, apply_version: u64) -> Self {
        Self {
            worker_id,
            shard_id,
            base_version,
            apply_version,
            staleness: apply_version.saturating_sub(base_version),
        }
    }
}

/// Mean of `grads`, summed in the given order (callers pass ascending
/// worker id).
pub fn aggregate<T: Real>(grads: &[&[T]]) -> Result<NetGradient<T>, RuntimeError> {
    let first = grads
        .first()
        .ok_or_else(|| RuntimeError::Protocol("aggregate of zero gradients".into()))?;
    let len = first.len();
    if let Some(bad) = grads.iter().find(|g| g.len() != len) {
        return Err(RuntimeError::Protocol(format!(
            "gradient lengths differ: {len} and {}",
            bad.len()
        )));
    }
    let mut sum = first.to_vec();
    for g in &grads[1..] {
        sum.iter_mut().zip(g.iter()).for_each(|(s, &x)| *s = *s + x);
    }
    let k = T::of(grads.len() as f64);
    sum.iter_mut().for_each(|s| *s = *s / k);
    Ok(NetGradient::from_vec(sum))
}

/// Gradients needed per sync update: `ceil(f * n)`, at least one.
pub fn straggler_threshold(n: usize, f: f64) -> usize {
    // a tiny slack keeps e.g. 0.28 * 25 = 7.000000000000001 from rounding up to 8
    let k = (f * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n.max(1))
}

/// Training samples behind one weight update.
pub fn effective_batch_size(n: usize, bs: usize, mode: Mode, f: f64) -> usize {
    match mode {
        Mode::Sync => straggler_threshold(n, f) * bs,
        Mode::Async => bs,
    }
}

/// Stop flags shared by every task of a cluster. Training tasks watch
/// `train`; servers keep serving until `infra` so that in-flight requests
/// of stopping workers still complete.
#[derive(Debug, Default)]
pub struct Signals {
    train: AtomicBool,
    infra: AtomicBool,
}

impl Signals {
    pub fn stop_training(&self) {
        self.train.store(true, Ordering::SeqCst);
    }

    pub fn training_stopped(&self) -> bool {
        self.train.load(Ordering::SeqCst)
    }

    pub(crate) fn stop_infra(&self) {
        self.infra.store(true, Ordering::SeqCst);
    }

    pub(crate) fn infra_stopped(&self) -> bool {
        self.infra.load(Ordering::SeqCst)
    }
}

/// Everything harvested from a finished run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub global_step: u64,
    pub precision: Precision,
    pub final_params: Vec<f64>,
    /// Checksum of the final parameters in the run's own precision.
    pub checksum: u64,
    pub shard_versions: Vec<u64>,
    /// Parameters after each sync update, when requested.
    pub trajectory: Vec<Vec<f64>>,
    /// Sync arrivals, applications and drops keyed by gradient base version.
    pub tallies: BTreeMap<u64, VersionTally>,
    pub drops: u64,
    pub duplicates: u64,
    pub workers: Vec<WorkerReport>,
    pub chief_counters: Option<CounterSnapshot>,
    pub ps_counters: Vec<CounterSnapshot>,
    pub telemetry: Telemetry,
    pub final_eval: Option<EvalReport>,
    pub target_reached: bool,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn worker_counters(&self) -> CounterSnapshot {
        self.workers.iter().map(|w| w.counters).sum()
    }
}

/// Handle on a running local cluster.
pub struct ClusterHandle {
    signals: Arc<Signals>,
    supervisor: JoinHandle<Result<RunReport, RuntimeError>>,
}

impl ClusterHandle {
    /// Asks every task to finish its current iteration and exit.
    pub fn stop(&self) {
        self.signals.stop_training();
    }

    pub fn signals(&self) -> Arc<Signals> {
        Arc::clone(&self.signals)
    }

    pub fn is_finished(&self) -> bool {
        self.supervisor.is_finished()
    }

    pub fn wait(self) -> Result<RunReport, RuntimeError> {
        self.supervisor.join().map_err(|_| RuntimeError::Panic {
            role: "supervisor".into(),
        })?
    }
}

/// Where clients reach a server.
#[derive(Clone)]
pub(crate) enum Dial {
    InProc(InProcConnector),
    Tcp(std::net::SocketAddr),
}

impl Dial {
    pub(crate) fn connect(&self, counters: &Arc<ByteCounters>) -> Result<ClientConn, RuntimeError> {
        Ok(match self {
            Dial::InProc(c) => c.connect(Arc::clone(counters))?,
            Dial::Tcp(a) => tcp_connect(*a, Arc::clone(counters), CONNECT_WAIT)?,
        })
    }
}

fn bind(
    kind: TransportKind,
    addr: Option<&str>,
    counters: Arc<ByteCounters>,
) -> Result<(Server, Dial), RuntimeError> {
    match kind {
        TransportKind::InProc => {
            let s = Server::in_proc(counters);
            let d = Dial::InProc(s.connector());
            Ok((s, d))
        }
        TransportKind::Tcp => {
            let addr = addr.unwrap_or("127.0.0.1:0");
            let (s, local) = Server::bind_tcp(addr, counters).map_err(|source| RuntimeError::Bind {
                addr: addr.to_string(),
                source,
            })?;
            Ok((s, Dial::Tcp(local)))
        }
    }
}

fn spawn<R: Send + 'static>(
    name: String,
    f: impl FnOnce() -> R + Send + 'static,
) -> JoinHandle<R> {
    std::thread::Builder::new()
        .name(name)
        .spawn(f)
        .expect("cannot spawn thread")
}

fn joined<R>(role: &str, h: JoinHandle<Result<R, RuntimeError>>) -> Result<R, RuntimeError> {
    h.join().map_err(|_| RuntimeError::Panic { role: role.into() })?
}

/// Starts parameter servers, workers, the chief (sync) or evaluator
/// (async) and the metrics collector, all wired through the chosen
/// transport.
pub fn launch_local(cfg: TrainConfig) -> Result<ClusterHandle, RuntimeError> {
    cfg.validate()?;
    match cfg.precision {
        Precision::Single => launch::<f32>(cfg),
        Precision::Double => launch::<f64>(cfg),
    }
}

/// [`launch_local`] followed by [`ClusterHandle::wait`].
pub fn run_local(cfg: TrainConfig) -> Result<RunReport, RuntimeError> {
    launch_local(cfg)?.wait()
}

fn launch<T: Real>(cfg: TrainConfig) -> Result<ClusterHandle, RuntimeError> {
    let start = Instant::now();
    let cfg = Arc::new(cfg);
    let arch = cfg.arch()?;
    let spec = &cfg.cluster;
    let signals = Arc::new(Signals::default());
    let shards = make_shards(arch.param_count(), spec.ps)?;
    let init: ParamVector<T> = init_params(&arch, cfg.seed);
    let kind = spec.transport;
    let addr_of = |i: usize| spec.addresses.as_ref().map(|a| a.ps[i].clone());

    // parameter servers
    let mut ps_dials = Vec::with_capacity(spec.ps);
    let mut ps_handles = Vec::with_capacity(spec.ps);
    let mut ps_counters = Vec::with_capacity(spec.ps);
    let (events_tx, events_rx) = mpsc::channel::<Event>();
    for s in &shards {
        let counters = Arc::new(ByteCounters::new());
        let (server, dial) = bind(kind, addr_of(s.shard_id as usize).as_deref(), Arc::clone(&counters))?;
        let values = init.as_slice()[s.range()].to_vec();
        let store = match spec.mode {
            Mode::Sync => ShardStore::new(*s, values)?,
            Mode::Async => ShardStore::with_optimizer(*s, values, cfg.optim)?,
        };
        let (sig, ev, mode) = (Arc::clone(&signals), events_tx.clone(), spec.mode);
        ps_handles.push(spawn(format!("ps-{}", s.shard_id), move || {
            let r = ps::serve_shard(server, store, mode, &sig, &ev, false);
            if r.is_err() {
                sig.stop_training();
            }
            r
        }));
        ps_dials.push(dial);
        ps_counters.push(counters);
    }

    // chief (sync only)
    let mut chief_dial = None;
    let mut chief_handle = None;
    let mut chief_counters = None;
    if spec.mode == Mode::Sync {
        let counters = Arc::new(ByteCounters::new());
        let chief_addr = spec.addresses.as_ref().map(|a| a.chief.clone());
        let (server, dial) = bind(kind, chief_addr.as_deref(), Arc::clone(&counters))?;
        let conns = ps_dials
            .iter()
            .map(|d| d.connect(&counters))
            .collect::<Result<Vec<_>, _>>()?;
        let core = ChiefCore::new(
            spec.n,
            spec.threshold(),
            shards.clone(),
            init.as_slice().to_vec(),
            cfg.optim,
        );
        let (c, sig, ev) = (Arc::clone(&cfg), Arc::clone(&signals), events_tx.clone());
        chief_handle = Some(spawn("chief".into(), move || {
            let r = chief::run_chief(&c, core, server, conns, &sig, &ev);
            sig.stop_training();
            r
        }));
        chief_dial = Some(dial);
        chief_counters = Some(counters);
    }

    // evaluator (async only): evaluates on its own connections when a
    // worker completes an update that is due for evaluation
    let mut eval_tx = None;
    let mut eval_handle = None;
    if spec.mode == Mode::Async {
        let (tx, rx) = mpsc::channel::<u64>();
        let counters = Arc::new(ByteCounters::new());
        let conns = ps_dials
            .iter()
            .map(|d| d.connect(&counters))
            .collect::<Result<Vec<_>, _>>()?;
        let (c, sig, ev, sh) = (Arc::clone(&cfg), Arc::clone(&signals), events_tx.clone(), shards.clone());
        eval_handle = Some(spawn("evaluator".into(), move || {
            worker::run_evaluator::<T>(&c, &sh, conns, rx, &sig, &ev)
        }));
        eval_tx = Some(tx);
    }

    // workers
    let tickets = Arc::new(AtomicU64::new(0));
    let mut worker_handles = Vec::with_capacity(spec.n);
    let mut worker_counters = Vec::with_capacity(spec.n);
    for w in 0..spec.n as u32 {
        let counters = Arc::new(ByteCounters::new());
        let ps_conns = ps_dials
            .iter()
            .map(|d| d.connect(&counters))
            .collect::<Result<Vec<_>, _>>()?;
        let chief_conn = chief_dial.as_ref().map(|d| d.connect(&counters)).transpose()?;
        let ctx = worker::WorkerCtx {
            cfg: Arc::clone(&cfg),
            worker_id: w,
            shards: shards.clone(),
            signals: Arc::clone(&signals),
            events: events_tx.clone(),
            tickets: Some(Arc::clone(&tickets)),
            eval_trigger: eval_tx.clone(),
            counters: Arc::clone(&counters),
        };
        worker_handles.push(spawn(format!("worker-{w}"), move || {
            let sig = Arc::clone(&ctx.signals);
            let r = worker::run_worker::<T>(ctx, ps_conns, chief_conn);
            if r.is_err() {
                sig.stop_training();
            }
            r
        }));
        worker_counters.push(counters);
    }
    drop(eval_tx);

    let collector_cfg = CollectorConfig {
        log_interval: cfg.log_interval,
        out: cfg.out.clone(),
        event_log: cfg.event_log.clone(),
        start,
    };
    let collector = spawn("collector".into(), move || {
        run_collector(collector_cfg, worker_counters, events_rx)
    });

    let sig = Arc::clone(&signals);
    let supervisor = spawn("supervisor".into(), move || {
        let mut first_err: Option<RuntimeError> = None;
        let mut workers = Vec::new();
        for (w, h) in worker_handles.into_iter().enumerate() {
            match joined(&format!("worker-{w}"), h) {
                Ok(r) => workers.push(r),
                Err(e) => keep(e, &mut first_err),
            }
        }
        let mut chief_report = None;
        if let Some(h) = chief_handle {
            match joined("chief", h) {
                Ok(r) => chief_report = Some(r),
                Err(e) => keep(e, &mut first_err),
            }
        }
        let mut eval_hit = false;
        if let Some(h) = eval_handle {
            match joined("evaluator", h) {
                Ok(hit) => eval_hit = hit,
                Err(e) => keep(e, &mut first_err),
            }
        }
        sig.stop_infra();
        let mut stores: Vec<ShardStore<T>> = Vec::new();
        for (i, h) in ps_handles.into_iter().enumerate() {
            match joined(&format!("ps-{i}"), h) {
                Ok(s) => stores.push(s),
                Err(e) => keep(e, &mut first_err),
            }
        }
        if let Some(e) = first_err {
            drop(events_tx);
            let _ = collector.join();
            return Err(e);
        }

        let mut flat: Vec<T> = Vec::with_capacity(arch.param_count());
        stores.iter().for_each(|s| flat.extend_from_slice(s.values()));
        let shard_versions: Vec<u64> = stores.iter().map(|s| s.version()).collect();
        let global_step = match &chief_report {
            Some(c) => c.global_step,
            None => shard_versions.iter().copied().min().unwrap_or(0),
        };
        let target_reached = chief_report.as_ref().is_some_and(|c| c.target_reached) || eval_hit;

        // closing evaluation unless the last update was just evaluated
        let mut final_eval = None;
        if cfg.eval_games > 0 && !(cfg.eval_due(global_step)) {
            let pv = ParamVector::from_vec(flat.clone());
            match eval_run(&arch, &pv, &cfg.env, cfg.eval_games, eval_seed(cfg.seed)) {
                Ok(mut r) => {
                    r.global_step = global_step;
                    let _ = events_tx.send(Event::Eval(r.clone()));
                    final_eval = Some(r);
                }
                Err(e) => return Err(e.into()),
            }
        }
        drop(events_tx);
        let telemetry = joined_collector(collector)?;
        if final_eval.is_none() {
            final_eval = telemetry.evals.last().cloned();
        }
        let (trajectory, tallies, drops, duplicates) = match chief_report {
            Some(c) => (c.trajectory, c.tallies, c.drops, c.duplicates),
            None => Default::default(),
        };
        Ok(RunReport {
            global_step,
            precision: T::PRECISION,
            checksum: checksum(&flat),
            final_params: flat.iter().map(|v| v.f64()).collect(),
            shard_versions,
            trajectory,
            tallies,
            drops,
            duplicates,
            workers,
            chief_counters: chief_counters.map(|c| c.snapshot()),
            ps_counters: ps_counters.iter().map(|c| c.snapshot()).collect(),
            telemetry,
            final_eval,
            target_reached,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    });
    Ok(ClusterHandle {
        signals,
        supervisor,
    })
}

fn keep(e: RuntimeError, first: &mut Option<RuntimeError>) {
    if first.is_none() {
        *first = Some(e);
    }
}

fn joined_collector(
    h: JoinHandle<Result<Telemetry, TelemetryError>>,
) -> Result<Telemetry, RuntimeError> {
    let t = h.join().map_err(|_| RuntimeError::Panic {
        role: "collector".into(),
    })??;
    Ok(t)
}

/// A single role of a multi-process TCP cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Role {
    Ps { index: usize, listen: String },
    Chief { listen: String, ps: Vec<String> },
    Worker { id: u32, chief: Option<String>, ps: Vec<String> },
}

/// Summary of one role process.
#[derive(Debug, Clone)]
pub struct RoleReport {
    pub global_step: u64,
    pub checksum: Option<u64>,
    pub telemetry: Option<Telemetry>,
    pub counters: CounterSnapshot,
}

/// Runs one role until its part of the run is over: a parameter server
/// exits once every client has disconnected, the chief after the step
/// limit or target, a worker when the chief (sync) goes away or after
/// `steps` of its own updates (async).
pub fn run_role(cfg: TrainConfig, role: Role) -> Result<RoleReport, RuntimeError> {
    cfg.validate()?;
    match cfg.precision {
        Precision::Single => role_impl::<f32>(cfg, role),
        Precision::Double => role_impl::<f64>(cfg, role),
    }
}

fn role_impl<T: Real>(cfg: TrainConfig, role: Role) -> Result<RoleReport, RuntimeError> {
    let start = Instant::now();
    let arch = cfg.arch()?;
    let shards = make_shards(arch.param_count(), cfg.cluster.ps)?;
    let init: ParamVector<T> = init_params(&arch, cfg.seed);
    let signals = Signals::default();
    let counters = Arc::new(ByteCounters::new());
    let dial_all = |addrs: &[String]| -> Result<Vec<ClientConn>, RuntimeError> {
        if addrs.len() != cfg.cluster.ps {
            return Err(RuntimeError::InvalidSpec(format!(
                "{} ps addresses for {} shards",
                addrs.len(),
                cfg.cluster.ps
            )));
        }
        addrs
            .iter()
            .map(|a| Ok(tcp_connect(a.as_str(), Arc::clone(&counters), CONNECT_WAIT)?))
            .collect()
    };
    match role {
        Role::Ps { index, listen } => {
            let s = *shards
                .get(index)
                .ok_or_else(|| RuntimeError::InvalidSpec(format!("no shard {index}")))?;
            let (server, _) = bind(TransportKind::Tcp, Some(&listen), Arc::clone(&counters))?;
            let values = init.as_slice()[s.range()].to_vec();
            let store = match cfg.cluster.mode {
                Mode::Sync => ShardStore::new(s, values)?,
                Mode::Async => ShardStore::with_optimizer(s, values, cfg.optim)?,
            };
            let (tx, rx) = mpsc::channel();
            let store = ps::serve_shard(server, store, cfg.cluster.mode, &signals, &tx, true)?;
            drop(tx);
            let hist: Vec<Event> = rx.into_iter().collect();
            let mut t = Telemetry::default();
            for ev in hist {
                if let Event::Staleness(r) = ev {
                    *t.staleness_hist.entry(r.staleness).or_default() += 1;
                    t.staleness_records += 1;
                }
            }
            Ok(RoleReport {
                global_step: store.version(),
                checksum: Some(checksum(store.values())),
                telemetry: Some(t),
                counters: counters.snapshot(),
            })
        }
        Role::Chief { listen, ps } => {
            if cfg.cluster.mode != Mode::Sync {
                return Err(RuntimeError::InvalidSpec("the chief role exists only in sync mode".into()));
            }
            let (server, _) = bind(TransportKind::Tcp, Some(&listen), Arc::clone(&counters))?;
            let conns = dial_all(&ps)?;
            let core = ChiefCore::new(
                cfg.cluster.n,
                cfg.cluster.threshold(),
                shards.clone(),
                init.as_slice().to_vec(),
                cfg.optim,
            );
            let (tx, rx) = mpsc::channel();
            let collector_cfg = CollectorConfig {
                log_interval: cfg.log_interval,
                out: cfg.out.clone(),
                event_log: cfg.event_log.clone(),
                start,
            };
            let collector = spawn("collector".into(), move || {
                run_collector(collector_cfg, Vec::new(), rx)
            });
            let report = chief::run_chief(&cfg, core, server, conns, &signals, &tx)?;
            drop(tx);
            let telemetry = joined_collector(collector)?;
            Ok(RoleReport {
                global_step: report.global_step,
                checksum: Some(report.checksum),
                telemetry: Some(telemetry),
                counters: counters.snapshot(),
            })
        }
        Role::Worker { id, chief, ps } => {
            if id as usize >= cfg.cluster.n {
                return Err(RuntimeError::InvalidSpec(format!(
                    "worker id {id} out of range for {} workers",
                    cfg.cluster.n
                )));
            }
            let ps_conns = dial_all(&ps)?;
            let chief_conn = match (cfg.cluster.mode, chief) {
                (Mode::Sync, Some(a)) => Some(tcp_connect(a.as_str(), Arc::clone(&counters), CONNECT_WAIT)?),
                (Mode::Sync, None) => {
                    return Err(RuntimeError::InvalidSpec("sync workers need the chief address".into()))
                }
                (Mode::Async, _) => None,
            };
            let (tx, _rx) = mpsc::channel();
            let ctx = worker::WorkerCtx {
                cfg: Arc::new(cfg),
                worker_id: id,
                shards,
                signals: Arc::new(signals),
                events: tx,
                tickets: None,
                eval_trigger: None,
                counters: Arc::clone(&counters),
            };
            let r = worker::run_worker::<T>(ctx, ps_conns, chief_conn)?;
            Ok(RoleReport {
                global_step: r.iterations,
                checksum: None,
                telemetry: None,
                counters: counters.snapshot(),
            })
        }
    }
}

/// Sends `Ack`-expecting requests and checks the acknowledged version.
pub(crate) fn expect_ack(reply: crate::transport::Msg, want: u64) -> Result<(), RuntimeError> {
    match reply {
        crate::transport::Msg::Ack { version } if version == want => Ok(()),
        other => Err(RuntimeError::Protocol(format!(
            "expected Ack for version {want}, got {other:?}"
        ))),
    }
}

pub(crate) fn send_event(events: &Sender<Event>, ev: Event) {
    // the collector outlives every task, so a send can only fail during
    // teardown after an error elsewhere
    let _ = events.send(ev);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_examples() {
        assert_eq!(straggler_threshold(64, 0.9), 58);
        assert_eq!(straggler_threshold(4, 1.0), 4);
        assert_eq!(straggler_threshold(1, 0.5), 1);
        assert_eq!(straggler_threshold(10, 0.9), 9);
        assert_eq!(straggler_threshold(4, 0.5), 2);
        assert_eq!(straggler_threshold(25, 0.28), 7);
        for n in 1..100 {
            assert_eq!(straggler_threshold(n, 1.0), n);
            assert!(straggler_threshold(n, 0.01) >= 1);
        }
    }

    #[test]
    fn effective_batch_examples() {
        assert_eq!(effective_batch_size(64, 32, Mode::Sync, 1.0), 2048);
        assert_eq!(effective_batch_size(8, 64, Mode::Sync, 1.0), 512);
        assert_eq!(effective_batch_size(64, 32, Mode::Async, 1.0), 32);
        assert_eq!(effective_batch_size(4, 32, Mode::Sync, 0.5), 64);
    }

    #[test]
    fn aggregate_examples() {
        let g = vec![0.5, -1.25, 3.0];
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert_eq!(aggregate(&[&g[..], &neg[..]]).unwrap().as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(aggregate(&[&g[..]]).unwrap().as_slice(), &g[..]);
        assert!(aggregate::<f64>(&[]).is_err());
        assert!(aggregate(&[&g[..], &g[..2]]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grads: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = grads.iter().map(|g| &g[..]).collect();
        let got = aggregate(&refs).unwrap();
        for i in 0..50 {
            let mut s = 0.0;
            for g in &grads {
                s += g[i];
            }
            assert!((got.as_slice()[i] - s / 4.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(ClusterSpec::default().validate().is_ok());
        let bad = [
            ClusterSpec { n: 0, ..Default::default() },
            ClusterSpec { ps: 0, ..Default::default() },
            ClusterSpec { c: 0, ..Default::default() },
            ClusterSpec { agg_frac: 0.0, ..Default::default() },
            ClusterSpec { agg_frac: 1.5, ..Default::default() },
            ClusterSpec { mode: Mode::Async, agg_frac: 0.9, ..Default::default() },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
        let cfg = TrainConfig {
            cluster: ClusterSpec { ps: 100_000, ..Default::default() },
            hidden: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seeds_are_distinct() {
        let s: std::collections::HashSet<u64> = (0..64).map(|w| worker_seed(7, w)).collect();
        assert_eq!(s.len(), 64);
        assert!(!s.contains(&eval_seed(7)));
        assert_ne!(worker_seed(7, 0), worker_seed(8, 0));
    }

    #[test]
    fn staleness_record_difference() {
        assert_eq!(StalenessRecord::new(1, None, 3, 3).staleness, 0);
        assert_eq!(StalenessRecord::new(1, Some(0), 3, 7).staleness, 4);
    }

    #[test]
    fn mode_and_transport_parse() {
        assert_eq!("sync".parse::<Mode>().unwrap(), Mode::Sync);
        assert_eq!("async".parse::<Mode>().unwrap(), Mode::Async);
        assert!("x".parse::<Mode>().is_err());
        assert_eq!("tcp".parse::<TransportKind>().unwrap(), TransportKind::Tcp);
        assert_eq!(TransportKind::InProc.as_str(), "inproc");
    }
}
