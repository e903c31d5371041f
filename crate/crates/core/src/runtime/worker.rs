use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, Sender};
use std::sync::Arc;
use std::time::Instant;

use super::{eval_seed, send_event, Mode, RuntimeError, Signals, TrainConfig};
use crate::algo::{loss_and_grad_threads, RolloutCollector};
use crate::nncore::ParamVector;
use crate::real::Real;
use crate::shard::ShardSpec;
use crate::telemetry::{eval_run, Event};
use crate::transport::{ByteCounters, ClientConn, CounterSnapshot, Msg, TransportError, Values};

/// Worker id used by the evaluator's fetches.
const EVALUATOR_ID: u32 = u32::MAX;

#[derive(Debug, Clone, Default)]
pub struct WorkerReport {
    pub worker_id: u32,
    /// Gradients computed and pushed.
    pub iterations: u64,
    pub data_points: u64,
    /// Sync fetches repeated because the shards were caught mid-update.
    pub fetch_retries: u64,
    /// Time spent inside the training loop.
    pub busy_s: f64,
    pub counters: CounterSnapshot,
}

pub(crate) struct WorkerCtx {
    pub cfg: Arc<TrainConfig>,
    pub worker_id: u32,
    pub shards: Vec<ShardSpec>,
    pub signals: Arc<Signals>,
    pub events: Sender<Event>,
    /// Shared async update counter; `None` in a standalone worker process,
    /// which then counts its own updates and treats a vanished peer as the
    /// end of the run.
    pub tickets: Option<Arc<AtomicU64>>,
    pub eval_trigger: Option<Sender<u64>>,
    pub counters: Arc<ByteCounters>,
}

/// Fetches every shard into `params` and returns the per-shard versions.
/// All requests go out before any reply is read.
fn fetch<T: Real>(
    ps: &mut [ClientConn],
    shards: &[ShardSpec],
    worker_id: u32,
    params: &mut [T],
) -> Result<Vec<u64>, RuntimeError> {
    for (s, conn) in shards.iter().zip(ps.iter_mut()) {
        conn.send(&Msg::GetParams {
            worker_id,
            shard_id: s.shard_id,
        })?;
    }
    let mut versions = Vec::with_capacity(shards.len());
    for (s, conn) in shards.iter().zip(ps.iter_mut()) {
        match conn.recv()? {
            Msg::Params {
                shard_id,
                version,
                values,
            } if shard_id == s.shard_id => {
                if !values.copy_into(&mut params[s.range()]) {
                    return Err(RuntimeError::Protocol(format!(
                        "shard {shard_id} returned {} {} values, expected {} {}",
                        values.len(),
                        values.precision().as_str(),
                        s.len,
                        T::PRECISION.as_str()
                    )));
                }
                versions.push(version);
            }
            other => {
                return Err(RuntimeError::Protocol(format!(
                    "expected Params for shard {}, got {other:?}",
                    s.shard_id
                )))
            }
        }
    }
    Ok(versions)
}

fn expect_any_ack(reply: Msg) -> Result<u64, RuntimeError> {
    match reply {
        Msg::Ack { version } => Ok(version),
        other => Err(RuntimeError::Protocol(format!("expected Ack, got {other:?}"))),
    }
}

pub(crate) fn run_worker<T: Real>(
    ctx: WorkerCtx,
    mut ps: Vec<ClientConn>,
    mut chief: Option<ClientConn>,
) -> Result<WorkerReport, RuntimeError> {
    let mut report = WorkerReport {
        worker_id: ctx.worker_id,
        ..Default::default()
    };
    let start = Instant::now();
    let r = worker_loop::<T>(&ctx, &mut ps, &mut chief, &mut report);
    report.busy_s = start.elapsed().as_secs_f64();
    report.counters = ctx.counters.snapshot();
    let standalone = ctx.tickets.is_none();
    match r {
        Ok(()) => Ok(report),
        // peers shut down once the run is over; a closed connection then is
        // the normal way out
        Err(RuntimeError::Transport(TransportError::Closed | TransportError::Io(_)))
            if ctx.signals.training_stopped() || standalone =>
        {
            Ok(report)
        }
        Err(e) => Err(e),
    }
}

fn worker_loop<T: Real>(
    ctx: &WorkerCtx,
    ps: &mut [ClientConn],
    chief: &mut Option<ClientConn>,
    report: &mut WorkerReport,
) -> Result<(), RuntimeError> {
    let cfg = &*ctx.cfg;
    let w = ctx.worker_id;
    let arch = cfg.arch()?;
    let mode = cfg.cluster.mode;
    let strict = cfg.cluster.threshold() == cfg.cluster.n;
    let mut collector = RolloutCollector::new(cfg.env, cfg.algo, cfg.n_sim, super::worker_seed(cfg.seed, w));
    let mut params = vec![T::zero(); arch.param_count()];
    let delay = cfg.worker_delay(w);
    let mut local_updates = 0u64;

    while !ctx.signals.training_stopped() {
        let versions = fetch(ps, &ctx.shards, w, &mut params)?;
        let base = versions[0];
        if mode == Mode::Sync && versions.iter().any(|&v| v != base) {
            if strict {
                return Err(RuntimeError::Protocol(format!(
                    "worker {w} fetched mismatched shard versions {versions:?}"
                )));
            }
            // caught the chief mid-broadcast; the next fetch is consistent
            report.fetch_retries += 1;
            std::thread::yield_now();
            continue;
        }

        let pv = ParamVector::from_vec(std::mem::take(&mut params));
        let events = &ctx.events;
        let batch = collector.collect(&arch, &pv, cfg.bs, |score| {
            send_event(events, Event::Episode { worker_id: w, score })
        })?;
        let out = loss_and_grad_threads(&arch, &pv, &batch, &cfg.algo, cfg.cluster.c)?;
        params = pv.into_vec();
        let grad = out.grad.into_vec();
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }

        match mode {
            Mode::Sync => {
                let conn = chief
                    .as_mut()
                    .ok_or_else(|| RuntimeError::InvalidSpec("sync worker without a chief".into()))?;
                for s in &ctx.shards {
                    conn.send(&Msg::PushGrad {
                        worker_id: w,
                        base_version: base,
                        shard_id: s.shard_id,
                        values: Values::from_slice(&grad[s.range()]),
                    })?;
                }
                report.iterations += 1;
                report.data_points += cfg.bs as u64;
                expect_any_ack(conn.recv()?)?;
            }
            Mode::Async => {
                let ticket = match &ctx.tickets {
                    Some(t) => t.fetch_add(1, Ordering::SeqCst),
                    None => local_updates,
                };
                if ticket >= cfg.steps {
                    ctx.signals.stop_training();
                    break;
                }
                for (s, conn) in ctx.shards.iter().zip(ps.iter_mut()) {
                    conn.send(&Msg::PushGrad {
                        worker_id: w,
                        base_version: versions[s.shard_id as usize],
                        shard_id: s.shard_id,
                        values: Values::from_slice(&grad[s.range()]),
                    })?;
                }
                for conn in ps.iter_mut() {
                    expect_any_ack(conn.recv()?)?;
                }
                local_updates += 1;
                report.iterations += 1;
                report.data_points += cfg.bs as u64;
                let step = ticket + 1;
                send_event(
                    events,
                    Event::Update {
                        global_step: step,
                        data_points: cfg.bs as u64,
                    },
                );
                if cfg.eval_due(step) {
                    if let Some(tx) = &ctx.eval_trigger {
                        let _ = tx.send(step);
                    }
                }
                if step >= cfg.steps {
                    ctx.signals.stop_training();
                }
            }
        }
    }
    Ok(())
}

/// Async-mode evaluation: fetches a snapshot of every shard whenever a
/// worker reports a due step and plays greedy games on it. Returns whether
/// the target score was reached. Ends when every worker has exited.
pub(crate) fn run_evaluator<T: Real>(
    cfg: &TrainConfig,
    shards: &[ShardSpec],
    mut ps: Vec<ClientConn>,
    triggers: Receiver<u64>,
    signals: &Signals,
    events: &Sender<Event>,
) -> Result<bool, RuntimeError> {
    let arch = cfg.arch()?;
    let mut params = vec![T::zero(); arch.param_count()];
    let mut hit = false;
    for step in triggers {
        if hit {
            continue;
        }
        fetch(&mut ps, shards, EVALUATOR_ID, &mut params)?;
        let pv = ParamVector::from_vec(std::mem::take(&mut params));
        let mut r = eval_run(&arch, &pv, &cfg.env, cfg.eval_games, eval_seed(cfg.seed))?;
        params = pv.into_vec();
        r.global_step = step;
        if cfg.target_score.is_some_and(|t| r.mean_score >= t) {
            hit = true;
            signals.stop_training();
        }
        send_event(events, Event::Eval(r));
    }
    Ok(hit)
}
