//! Binary message protocol between workers, the chief and parameter servers.
//!
//! Frame layout (all integers little-endian):
//!
//! ```text
//! [payload_len: u32][msg_type: u8][payload: payload_len bytes]
//! ```
//!
//! | type | message     | payload                                                   |
//! |------|-------------|-----------------------------------------------------------|
//! | 0x01 | GetParams   | worker_id u32, shard_id u16                               |
//! | 0x02 | Params      | shard_id u16, version u64, count u32, count x f32         |
//! | 0x03 | PushGrad    | worker_id u32, base_version u64, shard_id u16, count u32, count x f32 |
//! | 0x04 | WriteParams | shard_id u16, version u64, count u32, count x f32         |
//! | 0x05 | Ack         | version u64                                               |
//!
//! Double-precision runs send the value-carrying messages with the high bit
//! of the type set (0x82, 0x83, 0x84) and 8-byte values; everything else is
//! identical.

mod conn;

pub use conn::{tcp_connect, ClientConn, ConnId, Incoming, InProcConnector, Server};

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::real::{Precision, Real};

pub const HEADER_LEN: usize = 5;
/// Upper bound accepted when reading a frame from a stream.
pub const MAX_FRAME_PAYLOAD: usize = 1 << 30;

const T_GET_PARAMS: u8 = 0x01;
const T_PARAMS: u8 = 0x02;
const T_PUSH_GRAD: u8 = 0x03;
const T_WRITE_PARAMS: u8 = 0x04;
const T_ACK: u8 = 0x05;
const WIDE: u8 = 0x80;

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Values {
    pub fn from_slice<T: Real>(values: &[T]) -> Self {
        match T::PRECISION {
            Precision::Single => Values::F32(values.iter().map(|v| v.f64() as f32).collect()),
            Precision::Double => Values::F64(values.iter().map(|v| v.f64()).collect()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        match self {
            Values::F32(_) => Precision::Single,
            Values::F64(_) => Precision::Double,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Values::F32(_) => 4,
            Values::F64(_) => 8,
        }
    }

    /// Converts into `T`. Fails if the wire precision differs from `T`'s.
    pub fn into_vec<T: Real>(self) -> Option<Vec<T>> {
        match (self, T::PRECISION) {
            (Values::F32(v), Precision::Single) => Some(v.into_iter().map(|x| T::of(x as f64)).collect()),
            (Values::F64(v), Precision::Double) => Some(v.into_iter().map(T::of).collect()),
            _ => None,
        }
    }

    /// Copies into `out`, which must have the same length.
    pub fn copy_into<T: Real>(&self, out: &mut [T]) -> bool {
        if out.len() != self.len() || self.precision() != T::PRECISION {
            return false;
        }
        match self {
            Values::F32(v) => out.iter_mut().zip(v).for_each(|(o, &x)| *o = T::of(x as f64)),
            Values::F64(v) => out.iter_mut().zip(v).for_each(|(o, &x)| *o = T::of(x)),
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Msg {
    GetParams {
        worker_id: u32,
        shard_id: u16,
    },
    Params {
        shard_id: u16,
        version: u64,
        values: Values,
    },
    PushGrad {
        worker_id: u32,
        base_version: u64,
        shard_id: u16,
        values: Values,
    },
    WriteParams {
        shard_id: u16,
        version: u64,
        values: Values,
    },
    Ack {
        version: u64,
    },
}

impl Msg {
    pub fn kind(&self) -> &'static str {
        match self {
            Msg::GetParams { .. } => "GetParams",
            Msg::Params { .. } => "Params",
            Msg::PushGrad { .. } => "PushGrad",
            Msg::WriteParams { .. } => "WriteParams",
            Msg::Ack { .. } => "Ack",
        }
    }

    pub fn values(&self) -> Option<&Values> {
        match self {
            Msg::Params { values, .. }
            | Msg::PushGrad { values, .. }
            | Msg::WriteParams { values, .. } => Some(values),
            _ => None,
        }
    }

    /// Bytes of parameter or gradient values carried, excluding every
    /// fixed field.
    pub fn value_bytes(&self) -> usize {
        self.values().map_or(0, |v| v.len() * v.width())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("value count {0} exceeds the 32-bit count field")]
    TooManyValues(usize),
    #[error("payload of {0} bytes exceeds the 32-bit length field")]
    PayloadTooLarge(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated header: {0} of 5 bytes")]
    TruncatedHeader(usize),
    #[error("truncated payload: header declares {declared} bytes, {available} present")]
    TruncatedPayload { declared: usize, available: usize },
    #[error("trailing bytes: header declares {declared} bytes, {available} present")]
    TrailingBytes { declared: usize, available: usize },
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("{kind}: payload ended inside the fixed fields")]
    ShortFields { kind: &'static str },
    #[error("{kind}: declared {count} values ({needed} bytes) but {available} bytes follow")]
    CountMismatch {
        kind: &'static str,
        count: usize,
        needed: usize,
        available: usize,
    },
    #[error("{kind}: {extra} unexpected bytes after the fixed fields")]
    Oversized { kind: &'static str, extra: usize },
}

fn put_values(out: &mut Vec<u8>, values: &Values) -> Result<(), EncodeError> {
    let count = u32::try_from(values.len()).map_err(|_| EncodeError::TooManyValues(values.len()))?;
    out.extend_from_slice(&count.to_le_bytes());
    match values {
        Values::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Values::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(())
}

fn type_code(msg: &Msg) -> u8 {
    let wide = |v: &Values| if v.precision() == Precision::Double { WIDE } else { 0 };
    match msg {
        Msg::GetParams { .. } => T_GET_PARAMS,
        Msg::Params { values, .. } => T_PARAMS | wide(values),
        Msg::PushGrad { values, .. } => T_PUSH_GRAD | wide(values),
        Msg::WriteParams { values, .. } => T_WRITE_PARAMS | wide(values),
        Msg::Ack { .. } => T_ACK,
    }
}

pub fn encode(msg: &Msg) -> Result<Vec<u8>, EncodeError> {
    let cap = HEADER_LEN + 18 + msg.value_bytes();
    let mut out = Vec::with_capacity(cap);
    out.extend_from_slice(&[0, 0, 0, 0, type_code(msg)]);
    match msg {
        Msg::GetParams { worker_id, shard_id } => {
            out.extend_from_slice(&worker_id.to_le_bytes());
            out.extend_from_slice(&shard_id.to_le_bytes());
        }
        Msg::Params {
            shard_id,
            version,
            values,
        }
        | Msg::WriteParams {
            shard_id,
            version,
            values,
        } => {
            out.extend_from_slice(&shard_id.to_le_bytes());
            out.extend_from_slice(&version.to_le_bytes());
            put_values(&mut out, values)?;
        }
        Msg::PushGrad {
            worker_id,
            base_version,
            shard_id,
            values,
        } => {
            out.extend_from_slice(&worker_id.to_le_bytes());
            out.extend_from_slice(&base_version.to_le_bytes());
            out.extend_from_slice(&shard_id.to_le_bytes());
            put_values(&mut out, values)?;
        }
        Msg::Ack { version } => out.extend_from_slice(&version.to_le_bytes()),
    }
    let payload = out.len() - HEADER_LEN;
    let len = u32::try_from(payload).map_err(|_| EncodeError::PayloadTooLarge(payload))?;
    out[..4].copy_from_slice(&len.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    kind: &'static str,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        if self.buf.len() < N {
            return Err(DecodeError::ShortFields { kind: self.kind });
        }
        let (head, rest) = self.buf.split_at(N);
        self.buf = rest;
        Ok(head.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        self.take::<2>().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn values(&mut self, wide: bool) -> Result<Values, DecodeError> {
        let count = self.u32()? as usize;
        let width = if wide { 8 } else { 4 };
        let needed = count.saturating_mul(width);
        if needed != self.buf.len() {
            return Err(DecodeError::CountMismatch {
                kind: self.kind,
                count,
                needed,
                available: self.buf.len(),
            });
        }
        let bytes = std::mem::take(&mut self.buf);
        Ok(if wide {
            Values::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            )
        } else {
            Values::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            )
        })
    }

    fn finish(self) -> Result<(), DecodeError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(DecodeError::Oversized {
                kind: self.kind,
                extra: self.buf.len(),
            })
        }
    }
}

/// Decodes exactly one complete frame.
pub fn decode(bytes: &[u8]) -> Result<Msg, DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::TruncatedHeader(bytes.len()));
    }
    let declared = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let available = bytes.len() - HEADER_LEN;
    if available < declared {
        return Err(DecodeError::TruncatedPayload {
            declared,
            available,
        });
    }
    if available > declared {
        return Err(DecodeError::TrailingBytes {
            declared,
            available,
        });
    }
    let code = bytes[4];
    let wide = code & WIDE != 0;
    let base = code & !WIDE;
    let kind = match (base, wide) {
        (T_GET_PARAMS, false) => "GetParams",
        (T_PARAMS, _) => "Params",
        (T_PUSH_GRAD, _) => "PushGrad",
        (T_WRITE_PARAMS, _) => "WriteParams",
        (T_ACK, false) => "Ack",
        _ => return Err(DecodeError::UnknownType(code)),
    };
    let mut c = Cursor {
        buf: &bytes[HEADER_LEN..],
        kind,
    };
    let msg = match base {
        T_GET_PARAMS => Msg::GetParams {
            worker_id: c.u32()?,
            shard_id: c.u16()?,
        },
        T_PARAMS => Msg::Params {
            shard_id: c.u16()?,
            version: c.u64()?,
            values: c.values(wide)?,
        },
        T_PUSH_GRAD => Msg::PushGrad {
            worker_id: c.u32()?,
            base_version: c.u64()?,
            shard_id: c.u16()?,
            values: c.values(wide)?,
        },
        T_WRITE_PARAMS => Msg::WriteParams {
            shard_id: c.u16()?,
            version: c.u64()?,
            values: c.values(wide)?,
        },
        _ => Msg::Ack { version: c.u64()? },
    };
    c.finish()?;
    Ok(msg)
}

/// Payload bytes (header excluded) the encoder produces for `msg`.
pub fn payload_len(msg: &Msg) -> usize {
    let fixed = match msg {
        Msg::GetParams { .. } => 6,
        Msg::Params { .. } | Msg::WriteParams { .. } => 2 + 8 + 4,
        Msg::PushGrad { .. } => 4 + 8 + 2 + 4,
        Msg::Ack { .. } => 8,
    };
    fixed + msg.value_bytes()
}

/// Parameter plus gradient bytes moved per synchronous step: every worker
/// downloads the full model and uploads a full gradient, 4 bytes per value.
pub fn expected_bytes_per_sync_step(workers: u64, params: u64) -> u64 {
    2 * workers * 4 * params
}

/// Monotone per-endpoint traffic counters.
#[derive(Debug, Default)]
pub struct ByteCounters {
    tx_payload_bytes: AtomicU64,
    rx_payload_bytes: AtomicU64,
    tx_frames: AtomicU64,
    rx_frames: AtomicU64,
    tx_value_bytes: AtomicU64,
    rx_value_bytes: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CounterSnapshot {
    pub tx_payload_bytes: u64,
    pub rx_payload_bytes: u64,
    pub tx_frames: u64,
    pub rx_frames: u64,
    pub tx_value_bytes: u64,
    pub rx_value_bytes: u64,
}

impl CounterSnapshot {
    /// Header overhead is not part of the payload counters.
    pub fn header_bytes(&self) -> u64 {
        HEADER_LEN as u64 * (self.tx_frames + self.rx_frames)
    }
}

impl std::ops::Add for CounterSnapshot {
    type Output = CounterSnapshot;

    fn add(self, o: CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            tx_payload_bytes: self.tx_payload_bytes + o.tx_payload_bytes,
            rx_payload_bytes: self.rx_payload_bytes + o.rx_payload_bytes,
            tx_frames: self.tx_frames + o.tx_frames,
            rx_frames: self.rx_frames + o.rx_frames,
            tx_value_bytes: self.tx_value_bytes + o.tx_value_bytes,
            rx_value_bytes: self.rx_value_bytes + o.rx_value_bytes,
        }
    }
}

impl std::ops::Sub for CounterSnapshot {
    type Output = CounterSnapshot;

    fn sub(self, o: CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            tx_payload_bytes: self.tx_payload_bytes - o.tx_payload_bytes,
            rx_payload_bytes: self.rx_payload_bytes - o.rx_payload_bytes,
            tx_frames: self.tx_frames - o.tx_frames,
            rx_frames: self.rx_frames - o.rx_frames,
            tx_value_bytes: self.tx_value_bytes - o.tx_value_bytes,
            rx_value_bytes: self.rx_value_bytes - o.rx_value_bytes,
        }
    }
}

impl std::iter::Sum for CounterSnapshot {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(CounterSnapshot::default(), |a, b| a + b)
    }
}

impl ByteCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_tx(&self, frame_len: usize, value_bytes: usize) {
        self.tx_frames.fetch_add(1, Ordering::Relaxed);
        self.tx_payload_bytes
            .fetch_add((frame_len - HEADER_LEN) as u64, Ordering::Relaxed);
        self.tx_value_bytes.fetch_add(value_bytes as u64, Ordering::Relaxed);
    }

    pub fn record_rx(&self, frame_len: usize, value_bytes: usize) {
        self.rx_frames.fetch_add(1, Ordering::Relaxed);
        self.rx_payload_bytes
            .fetch_add((frame_len - HEADER_LEN) as u64, Ordering::Relaxed);
        self.rx_value_bytes.fetch_add(value_bytes as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            tx_payload_bytes: self.tx_payload_bytes.load(Ordering::Relaxed),
            rx_payload_bytes: self.rx_payload_bytes.load(Ordering::Relaxed),
            tx_frames: self.tx_frames.load(Ordering::Relaxed),
            rx_frames: self.rx_frames.load(Ordering::Relaxed),
            tx_value_bytes: self.tx_value_bytes.load(Ordering::Relaxed),
            rx_value_bytes: self.rx_value_bytes.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("malformed frame: {0}")]
    Decode(#[from] DecodeError),
    #[error("malformed frame on connection {conn}: {err}")]
    PeerDecode { conn: ConnId, err: DecodeError },
    #[error("frame of {0} payload bytes exceeds the accepted maximum")]
    FrameTooLarge(usize),
    #[error("connection closed")]
    Closed,
    #[error("unknown connection {0}")]
    UnknownConn(ConnId),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
