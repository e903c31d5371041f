//! Throughput, score, staleness and traffic measurements, funneled through a
//! single collector that owns the metrics CSV.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::Receiver;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algo::greedy_action;
use crate::env::{Action, EnvConfig, Simulator};
use crate::nncore::{forward, NetArch, NetError, ParamVector};
use crate::real::Real;
use crate::runtime::StalenessRecord;
use crate::transport::{ByteCounters, CounterSnapshot};

pub const CSV_HEADER: &str = "step,wall_time_s,dp_per_s,online_score_mean,eval_score_mean,staleness_p50,staleness_max,drops,tx_payload_bytes,rx_payload_bytes";

/// Episodes averaged into the online score.
pub const ONLINE_WINDOW: usize = 50;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("elapsed time must be positive, got {0}")]
    Elapsed(f64),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot read metrics: {0}")]
    Read(#[from] csv::Error),
    #[error("bad metrics header: {0:?}")]
    Header(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub wall_time_s: f64,
    pub dp_per_s: f64,
    pub online_score_mean: Option<f64>,
    pub eval_score_mean: Option<f64>,
    pub staleness_p50: u64,
    pub staleness_max: u64,
    pub drops: u64,
    pub tx_payload_bytes: u64,
    pub rx_payload_bytes: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    /// Rust's float `Display` never uses exponent notation and round-trips.
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.wall_time_s,
            self.dp_per_s,
            opt(self.online_score_mean),
            opt(self.eval_score_mean),
            self.staleness_p50,
            self.staleness_max,
            self.drops,
            self.tx_payload_bytes,
            self.rx_payload_bytes
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub global_step: u64,
    pub games: usize,
    pub mean_score: f64,
    pub scores: Vec<f64>,
}

pub fn record_throughput(dp_count: u64, elapsed_s: f64) -> Result<f64, TelemetryError> {
    if elapsed_s.is_nan() || elapsed_s <= 0.0 {
        return Err(TelemetryError::Elapsed(elapsed_s));
    }
    Ok(dp_count as f64 / elapsed_s)
}

/// Plays `games` episodes with the argmax policy. Reads `params` only.
pub fn eval_run<T: Real>(
    arch: &NetArch,
    params: &ParamVector<T>,
    env: &EnvConfig,
    games: usize,
    seed: u64,
) -> Result<EvalReport, TelemetryError> {
    let mut sim = Simulator::new(*env, seed);
    let mut scores = Vec::with_capacity(games);
    let mut input = Vec::with_capacity(env.obs_len());
    while scores.len() < games {
        input.clear();
        input.extend(sim.observation().as_slice().iter().map(|&x| T::of(x as f64)));
        let trace = forward(arch, params, &input, 1)?;
        let action = Action::from_index(greedy_action(trace.probs()))
            .expect("network has exactly the environment's actions");
        let step = sim.step(action).expect("simulator resets itself");
        if let Some(score) = step.episode_return {
            scores.push(score);
        }
    }
    let mean_score = if games == 0 {
        0.0
    } else {
        scores.iter().sum::<f64>() / games as f64
    };
    Ok(EvalReport {
        global_step: 0,
        games,
        mean_score,
        scores,
    })
}

/// Lower median and maximum of a window; `(0, 0)` when empty.
pub fn staleness_summary(window: &mut [u64]) -> (u64, u64) {
    if window.is_empty() {
        return (0, 0);
    }
    window.sort_unstable();
    (window[(window.len() - 1) / 2], window[window.len() - 1])
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> TelemetryError + '_ {
    move |source| TelemetryError::Write {
        path: path.to_path_buf(),
        source,
    }
}

/// Incremental metrics file: header on creation, one flushed line per row.
pub struct CsvSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self, TelemetryError> {
        let file = File::create(path).map_err(write_err(path))?;
        let mut sink = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        writeln!(sink.out, "{CSV_HEADER}").map_err(write_err(path))?;
        sink.out.flush().map_err(write_err(path))?;
        Ok(sink)
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<(), TelemetryError> {
        writeln!(self.out, "{}", row.to_csv_line()).map_err(write_err(&self.path))?;
        self.out.flush().map_err(write_err(&self.path))
    }
}

pub fn write_csv(rows: &[MetricsRow], path: &Path) -> Result<(), TelemetryError> {
    let mut sink = CsvSink::create(path)?;
    rows.iter().try_for_each(|r| sink.push(r))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>, TelemetryError> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(TelemetryError::Header(header));
    }
    let rows = reader.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

pub fn write_staleness_histogram(
    hist: &BTreeMap<u64, u64>,
    path: &Path,
) -> Result<(), TelemetryError> {
    let mut out = BufWriter::new(File::create(path).map_err(write_err(path))?);
    writeln!(out, "staleness,count").map_err(write_err(path))?;
    for (s, c) in hist {
        writeln!(out, "{s},{c}").map_err(write_err(path))?;
    }
    out.flush().map_err(write_err(path))
}

/// Everything a task can report to the collector.
#[derive(Debug, Clone)]
pub enum Event {
    /// A gradient update was applied; `data_points` were consumed by it.
    Update { global_step: u64, data_points: u64 },
    Episode { worker_id: u32, score: f64 },
    Staleness(StalenessRecord),
    Drop {
        worker_id: u32,
        base_version: u64,
        current_version: u64,
    },
    Duplicate { worker_id: u32, version: u64 },
    Eval(EvalReport),
}

#[derive(Debug, Clone)]
pub struct CollectorConfig {
    pub log_interval: u64,
    pub out: Option<PathBuf>,
    /// JSON-lines log of staleness records and drops.
    pub event_log: Option<PathBuf>,
    pub start: Instant,
}

/// What the collector saw over a whole run.
#[derive(Debug, Clone, Default)]
pub struct Telemetry {
    pub rows: Vec<MetricsRow>,
    pub evals: Vec<EvalReport>,
    pub staleness_hist: BTreeMap<u64, u64>,
    pub staleness_records: u64,
    pub data_points: u64,
    pub updates: u64,
    pub episodes: u64,
    pub drops: u64,
    pub duplicates: u64,
    pub last_step: u64,
}

impl Telemetry {
    pub fn max_staleness(&self) -> Option<u64> {
        self.staleness_hist.keys().next_back().copied()
    }
}

struct Collector {
    cfg: CollectorConfig,
    counters: Vec<Arc<ByteCounters>>,
    csv: Option<CsvSink>,
    events: Option<BufWriter<File>>,
    recent: VecDeque<f64>,
    window: Vec<u64>,
    last_row_step: Option<u64>,
    last_row_time: f64,
    dp_since_row: u64,
    t: Telemetry,
}

impl Collector {
    fn bytes(&self) -> CounterSnapshot {
        self.counters.iter().map(|c| c.snapshot()).sum()
    }

    fn row(&mut self, step: u64, eval: Option<f64>) -> Result<(), TelemetryError> {
        let now = self.cfg.start.elapsed().as_secs_f64();
        let elapsed = (now - self.last_row_time).max(f64::MIN_POSITIVE);
        let dp_per_s = record_throughput(self.dp_since_row, elapsed)?;
        let (p50, max) = staleness_summary(&mut self.window);
        let bytes = self.bytes();
        let online = if self.recent.is_empty() {
            None
        } else {
            Some(self.recent.iter().sum::<f64>() / self.recent.len() as f64)
        };
        let row = MetricsRow {
            step,
            wall_time_s: now,
            dp_per_s,
            online_score_mean: online,
            eval_score_mean: eval,
            staleness_p50: p50,
            staleness_max: max,
            drops: self.t.drops,
            tx_payload_bytes: bytes.tx_payload_bytes,
            rx_payload_bytes: bytes.rx_payload_bytes,
        };
        if let Some(csv) = self.csv.as_mut() {
            csv.push(&row)?;
        }
        self.t.rows.push(row);
        self.window.clear();
        self.dp_since_row = 0;
        self.last_row_time = now;
        self.last_row_step = Some(step);
        Ok(())
    }

    fn log(&mut self, line: serde_json::Value) -> Result<(), TelemetryError> {
        if let Some(out) = self.events.as_mut() {
            let path = self.cfg.event_log.as_deref().unwrap_or(Path::new(""));
            writeln!(out, "{line}").map_err(write_err(path))?;
        }
        Ok(())
    }

    fn handle(&mut self, ev: Event) -> Result<(), TelemetryError> {
        match ev {
            Event::Update {
                global_step,
                data_points,
            } => {
                self.t.updates += 1;
                self.t.data_points += data_points;
                self.dp_since_row += data_points;
                self.t.last_step = self.t.last_step.max(global_step);
                if global_step % self.cfg.log_interval.max(1) == 0
                    && self.last_row_step != Some(global_step)
                {
                    self.row(global_step, None)?;
                }
            }
            Event::Episode { score, .. } => {
                self.t.episodes += 1;
                if self.recent.len() == ONLINE_WINDOW {
                    self.recent.pop_front();
                }
                self.recent.push_back(score);
            }
            Event::Staleness(rec) => {
                self.t.staleness_records += 1;
                *self.t.staleness_hist.entry(rec.staleness).or_default() += 1;
                self.window.push(rec.staleness);
                self.log(serde_json::json!({
                    "event": "staleness",
                    "worker_id": rec.worker_id,
                    "shard_id": rec.shard_id,
                    "base_version": rec.base_version,
                    "apply_version": rec.apply_version,
                    "staleness": rec.staleness,
                }))?;
            }
            Event::Drop {
                worker_id,
                base_version,
                current_version,
            } => {
                self.t.drops += 1;
                self.log(serde_json::json!({
                    "event": "drop",
                    "worker_id": worker_id,
                    "base_version": base_version,
                    "current_version": current_version,
                }))?;
            }
            Event::Duplicate { worker_id, version } => {
                self.t.duplicates += 1;
                self.log(serde_json::json!({
                    "event": "duplicate",
                    "worker_id": worker_id,
                    "version": version,
                }))?;
            }
            Event::Eval(report) => {
                self.row(report.global_step, Some(report.mean_score))?;
                self.t.evals.push(report);
            }
        }
        Ok(())
    }
}

/// Drains `rx` until every sender is gone, then writes a closing row if the
/// last update has not been logged yet.
pub fn run_collector(
    cfg: CollectorConfig,
    counters: Vec<Arc<ByteCounters>>,
    rx: Receiver<Event>,
) -> Result<Telemetry, TelemetryError> {
    let csv = cfg.out.as_deref().map(CsvSink::create).transpose()?;
    let events = match cfg.event_log.as_deref() {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(write_err(p))?)),
        None => None,
    };
    let mut c = Collector {
        cfg,
        counters,
        csv,
        events,
        recent: VecDeque::with_capacity(ONLINE_WINDOW),
        window: Vec::new(),
        last_row_step: None,
        last_row_time: 0.0,
        dp_since_row: 0,
        t: Telemetry::default(),
    };
    for ev in rx {
        c.handle(ev)?;
    }
    if c.t.updates > 0 && c.last_row_step != Some(c.t.last_step) {
        let step = c.t.last_step;
        c.row(step, None)?;
    }
    if let Some(out) = c.events.as_mut() {
        let path = c.cfg.event_log.clone().unwrap_or_default();
        out.flush().map_err(write_err(&path))?;
    }
    Ok(c.t)
}
