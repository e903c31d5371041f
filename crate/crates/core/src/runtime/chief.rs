use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc::Sender;

use super::{aggregate, eval_seed, expect_ack, send_event, RuntimeError, Signals, StalenessRecord, TrainConfig, POLL};
use crate::nncore::ParamVector;
use crate::optim::{OptimConfig, Optimizer};
use crate::real::{checksum, Real};
use crate::shard::ShardSpec;
use crate::telemetry::{eval_run, Event};
use crate::transport::{ClientConn, ConnId, Incoming, Msg, Server, Values};

/// Gradient arrivals for one base version and what became of them.
/// `applied + dropped == arrivals` once the version is superseded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VersionTally {
    pub arrivals: u64,
    pub applied: u64,
    /// Late or duplicate gradients.
    pub dropped: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PushOutcome {
    /// More shard slices of this worker's gradient are outstanding.
    Partial,
    /// Complete and pending; `pending` gradients are now waiting.
    Accepted { pending: usize },
    /// The threshold was reached and one optimizer step applied.
    Applied {
        base_version: u64,
        new_version: u64,
        /// Ascending worker ids whose gradients were averaged.
        contributors: Vec<u32>,
    },
    /// Computed against an older version than the current one.
    Dropped {
        worker_id: u32,
        base_version: u64,
        current: u64,
    },
    /// A second complete gradient from a worker already pending.
    Duplicate { worker_id: u32 },
}

struct Assembly<T> {
    base: u64,
    grad: Vec<T>,
    seen: Vec<bool>,
    filled: usize,
}

/// Synchronous aggregation state: pending gradients for the current
/// version, the full parameter vector and its optimizer state.
pub struct ChiefCore<T> {
    n: usize,
    threshold: usize,
    shards: Vec<ShardSpec>,
    params: Vec<T>,
    cfg: OptimConfig,
    optim: Optimizer<T>,
    version: u64,
    assembling: HashMap<u32, Assembly<T>>,
    pending: BTreeMap<u32, Vec<T>>,
    tallies: BTreeMap<u64, VersionTally>,
    drops: u64,
    duplicates: u64,
}

impl<T: Real> ChiefCore<T> {
    pub fn new(
        n: usize,
        threshold: usize,
        shards: Vec<ShardSpec>,
        params: Vec<T>,
        cfg: OptimConfig,
    ) -> Self {
        let optim = Optimizer::new(&cfg, params.len());
        Self {
            n,
            threshold: threshold.clamp(1, n.max(1)),
            shards,
            params,
            cfg,
            optim,
            version: 0,
            assembling: HashMap::new(),
            pending: BTreeMap::new(),
            tallies: BTreeMap::new(),
            drops: 0,
            duplicates: 0,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn drops(&self) -> u64 {
        self.drops
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn tallies(&self) -> &BTreeMap<u64, VersionTally> {
        &self.tallies
    }

    pub fn shards(&self) -> &[ShardSpec] {
        &self.shards
    }

    /// Feeds one shard slice of a worker's gradient.
    pub fn on_push(
        &mut self,
        worker_id: u32,
        base_version: u64,
        shard_id: u16,
        values: &Values,
    ) -> Result<PushOutcome, RuntimeError> {
        if worker_id as usize >= self.n {
            return Err(RuntimeError::Protocol(format!(
                "gradient from unknown worker {worker_id}"
            )));
        }
        let spec = *self.shards.get(shard_id as usize).ok_or_else(|| {
            RuntimeError::Protocol(format!("gradient slice for unknown shard {shard_id}"))
        })?;
        if values.len() != spec.len {
            return Err(RuntimeError::Protocol(format!(
                "shard {shard_id} gradient slice has {} values, expected {}",
                values.len(),
                spec.len
            )));
        }
        if base_version > self.version {
            return Err(RuntimeError::Protocol(format!(
                "worker {worker_id} claims base version {base_version} ahead of {}",
                self.version
            )));
        }
        let total = self.params.len();
        let ps = self.shards.len();
        let asm = self.assembling.entry(worker_id).or_insert_with(|| Assembly {
            base: base_version,
            grad: vec![T::zero(); total],
            seen: vec![false; ps],
            filled: 0,
        });
        if asm.base != base_version {
            return Err(RuntimeError::Protocol(format!(
                "worker {worker_id} mixed base versions {} and {base_version} in one gradient",
                asm.base
            )));
        }
        if asm.seen[shard_id as usize] {
            return Err(RuntimeError::Protocol(format!(
                "worker {worker_id} sent shard {shard_id} twice in one gradient"
            )));
        }
        if !values.copy_into(&mut asm.grad[spec.range()]) {
            return Err(RuntimeError::Protocol(format!(
                "gradient precision {} does not match the chief's {}",
                values.precision().as_str(),
                T::PRECISION.as_str()
            )));
        }
        if let Some(i) = asm.grad[spec.range()].iter().position(|g| !g.is_finite()) {
            return Err(RuntimeError::Protocol(format!(
                "worker {worker_id} sent a non-finite gradient at index {}",
                spec.offset + i
            )));
        }
        asm.seen[shard_id as usize] = true;
        asm.filled += 1;
        if asm.filled < ps {
            return Ok(PushOutcome::Partial);
        }
        let asm = self.assembling.remove(&worker_id).expect("entry just used");
        Ok(self.on_complete(worker_id, asm.base, asm.grad)?)
    }

    fn on_complete(
        &mut self,
        worker_id: u32,
        base: u64,
        grad: Vec<T>,
    ) -> Result<PushOutcome, RuntimeError> {
        let tally = self.tallies.entry(base).or_default();
        tally.arrivals += 1;
        if base < self.version {
            tally.dropped += 1;
            self.drops += 1;
            return Ok(PushOutcome::Dropped {
                worker_id,
                base_version: base,
                current: self.version,
            });
        }
        if self.pending.contains_key(&worker_id) {
            tally.dropped += 1;
            self.duplicates += 1;
            return Ok(PushOutcome::Duplicate { worker_id });
        }
        self.pending.insert(worker_id, grad);
        if self.pending.len() < self.threshold {
            return Ok(PushOutcome::Accepted {
                pending: self.pending.len(),
            });
        }
        let pending = std::mem::take(&mut self.pending);
        let contributors: Vec<u32> = pending.keys().copied().collect();
        let refs: Vec<&[T]> = pending.values().map(|g| &g[..]).collect();
        let mean = aggregate(&refs)?;
        self.optim.step(&mut self.params, mean.as_slice(), &self.cfg)?;
        if let Some(i) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(RuntimeError::Protocol(format!(
                "update produced a non-finite parameter at index {i}"
            )));
        }
        self.tallies.entry(base).or_default().applied += contributors.len() as u64;
        self.version += 1;
        Ok(PushOutcome::Applied {
            base_version: base,
            new_version: self.version,
            contributors,
        })
    }
}

pub(crate) struct ChiefReport {
    pub global_step: u64,
    pub checksum: u64,
    pub trajectory: Vec<Vec<f64>>,
    pub tallies: BTreeMap<u64, VersionTally>,
    pub drops: u64,
    pub duplicates: u64,
    pub target_reached: bool,
}

/// Writes the chief's parameters to every shard under `version`.
fn broadcast<T: Real>(
    core: &ChiefCore<T>,
    ps: &mut [ClientConn],
    version: u64,
) -> Result<(), RuntimeError> {
    for (spec, conn) in core.shards().iter().zip(ps.iter_mut()) {
        conn.send(&Msg::WriteParams {
            shard_id: spec.shard_id,
            version,
            values: Values::from_slice(&core.params()[spec.range()]),
        })?;
    }
    for conn in ps.iter_mut() {
        expect_ack(conn.recv()?, version)?;
    }
    Ok(())
}

pub(crate) fn run_chief<T: Real>(
    cfg: &TrainConfig,
    mut core: ChiefCore<T>,
    mut server: Server,
    mut ps: Vec<ClientConn>,
    signals: &Signals,
    events: &Sender<Event>,
) -> Result<ChiefReport, RuntimeError> {
    let arch = cfg.arch()?;
    let bs = cfg.bs as u64;
    let mut conns: HashMap<u32, ConnId> = HashMap::new();
    let mut trajectory = Vec::new();
    let mut target_reached = false;
    while !signals.training_stopped() {
        let Some(incoming) = server.next(POLL)? else {
            continue;
        };
        let (conn, msg) = match incoming {
            Incoming::Opened(_) => continue,
            Incoming::Closed(c) => {
                if !signals.training_stopped() && conns.values().any(|&x| x == c) {
                    return Err(RuntimeError::Protocol(
                        "a worker disconnected before the run finished".into(),
                    ));
                }
                continue;
            }
            Incoming::Message(conn, msg) => (conn, msg),
        };
        let Msg::PushGrad {
            worker_id,
            base_version,
            shard_id,
            values,
        } = msg
        else {
            return Err(RuntimeError::Protocol(format!(
                "chief received a {} message",
                msg.kind()
            )));
        };
        conns.insert(worker_id, conn);
        match core.on_push(worker_id, base_version, shard_id, &values)? {
            PushOutcome::Partial | PushOutcome::Accepted { .. } => {}
            PushOutcome::Duplicate { worker_id } => send_event(
                events,
                Event::Duplicate {
                    worker_id,
                    version: core.version(),
                },
            ),
            PushOutcome::Dropped {
                worker_id,
                base_version,
                current,
            } => {
                send_event(
                    events,
                    Event::Drop {
                        worker_id,
                        base_version,
                        current_version: current,
                    },
                );
                server.reply(conn, &Msg::Ack { version: current })?;
            }
            PushOutcome::Applied {
                base_version,
                new_version,
                contributors,
            } => {
                broadcast(&core, &mut ps, new_version)?;
                for &w in &contributors {
                    send_event(
                        events,
                        Event::Staleness(StalenessRecord::new(w, None, base_version, base_version)),
                    );
                }
                if cfg.record_trajectory {
                    trajectory.push(core.params().iter().map(|v| v.f64()).collect());
                }
                if cfg.eval_due(new_version) {
                    let pv = ParamVector::from_vec(core.params().to_vec());
                    let mut r = eval_run(&arch, &pv, &cfg.env, cfg.eval_games, eval_seed(cfg.seed))?;
                    r.global_step = new_version;
                    if cfg.target_score.is_some_and(|t| r.mean_score >= t) {
                        target_reached = true;
                    }
                    send_event(events, Event::Eval(r));
                }
                send_event(
                    events,
                    Event::Update {
                        global_step: new_version,
                        data_points: contributors.len() as u64 * bs,
                    },
                );
                let done = new_version >= cfg.steps || target_reached;
                if done {
                    // raised before the acks so no worker starts another round
                    signals.stop_training();
                }
                for w in &contributors {
                    let c = conns[w];
                    server.reply(c, &Msg::Ack { version: new_version })?;
                }
                if done {
                    break;
                }
            }
        }
    }
    server.shutdown();
    Ok(ChiefReport {
        global_step: core.version(),
        checksum: checksum(core.params()),
        trajectory,
        tallies: core.tallies().clone(),
        drops: core.drops(),
        duplicates: core.duplicates(),
        target_reached,
    })
}
