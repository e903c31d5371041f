use std::sync::mpsc::Sender;

use super::{send_event, Mode, RuntimeError, Signals, StalenessRecord, POLL};
use crate::real::Real;
use crate::shard::ShardStore;
use crate::telemetry::Event;
use crate::transport::{Incoming, Msg, Server, Values};

fn values_as<T: Real>(values: Values, what: &str) -> Result<Vec<T>, RuntimeError> {
    let wire = values.precision();
    values.into_vec::<T>().ok_or_else(|| {
        RuntimeError::Protocol(format!(
            "{what} carries {} values but the server runs in {}",
            wire.as_str(),
            T::PRECISION.as_str()
        ))
    })
}

/// Serves one shard until the infra stop flag is raised or, with
/// `exit_when_idle`, until every client that connected has gone.
pub(crate) fn serve_shard<T: Real>(
    mut server: Server,
    mut store: ShardStore<T>,
    mode: Mode,
    signals: &Signals,
    events: &Sender<Event>,
    exit_when_idle: bool,
) -> Result<ShardStore<T>, RuntimeError> {
    let me = store.spec().shard_id;
    let mut seen_client = false;
    loop {
        if signals.infra_stopped() {
            break;
        }
        let Some(incoming) = server.next(POLL)? else {
            continue;
        };
        let (conn, msg) = match incoming {
            Incoming::Opened(_) => {
                seen_client = true;
                continue;
            }
            Incoming::Closed(_) => {
                if exit_when_idle && seen_client && server.open_connections() == 0 {
                    break;
                }
                continue;
            }
            Incoming::Message(conn, msg) => (conn, msg),
        };
        let reply = handle(&mut store, mode, me, msg, events)?;
        if let Err(e) = server.reply(conn, &reply) {
            // a client that hung up mid-request is only a problem if
            // training is still meant to be running
            if !signals.training_stopped() {
                return Err(e.into());
            }
        }
    }
    server.shutdown();
    Ok(store)
}

fn check_shard(me: u16, shard_id: u16) -> Result<(), RuntimeError> {
    if shard_id != me {
        return Err(RuntimeError::Protocol(format!(
            "shard {me} received a request for shard {shard_id}"
        )));
    }
    Ok(())
}

fn handle<T: Real>(
    store: &mut ShardStore<T>,
    mode: Mode,
    me: u16,
    msg: Msg,
    events: &Sender<Event>,
) -> Result<Msg, RuntimeError> {
    match msg {
        Msg::GetParams { shard_id, .. } => {
            check_shard(me, shard_id)?;
            Ok(Msg::Params {
                shard_id,
                version: store.version(),
                values: Values::from_slice(store.values()),
            })
        }
        Msg::WriteParams {
            shard_id,
            version,
            values,
        } => {
            check_shard(me, shard_id)?;
            if mode != Mode::Sync {
                return Err(RuntimeError::Protocol("WriteParams in async mode".into()));
            }
            let v = store.write_params(values_as(values, "WriteParams")?, version)?;
            Ok(Msg::Ack { version: v })
        }
        Msg::PushGrad {
            worker_id,
            base_version,
            shard_id,
            values,
        } => {
            check_shard(me, shard_id)?;
            if mode != Mode::Async {
                return Err(RuntimeError::Protocol(
                    "PushGrad sent to a parameter server in sync mode".into(),
                ));
            }
            let grad = values_as::<T>(values, "PushGrad")?;
            let applied_against = store.version();
            let a = store.apply_gradient_async(&grad, base_version)?;
            send_event(
                events,
                Event::Staleness(StalenessRecord::new(
                    worker_id,
                    Some(shard_id),
                    base_version,
                    applied_against,
                )),
            );
            debug_assert_eq!(a.staleness, applied_against - base_version);
            Ok(Msg::Ack {
                version: a.new_version,
            })
        }
        other @ (Msg::Params { .. } | Msg::Ack { .. }) => Err(RuntimeError::Protocol(format!(
            "parameter server received a {} message",
            other.kind()
        ))),
    }
}
