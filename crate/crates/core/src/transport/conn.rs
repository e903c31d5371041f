//! Client and server endpoints over in-process channels or TCP.
//!
//! Both transports carry the exact same frames; counters are updated at the
//! endpoints from the encoded frame, so identical message sequences produce
//! identical counts on either.

use std::collections::HashMap;
use std::io::{BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::{decode, encode, ByteCounters, Msg, TransportError, HEADER_LEN, MAX_FRAME_PAYLOAD};

pub type ConnId = u64;

trait FrameSink: Send {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<(), TransportError>;
    fn close(&mut self) {}
}

trait FrameSource: Send {
    /// `Ok(None)` means the peer closed the connection.
    fn recv_frame(&mut self) -> Result<Option<Vec<u8>>, TransportError>;
}

enum Inbound {
    Opened(ConnId, Box<dyn FrameSink>),
    Frame(ConnId, Vec<u8>),
    Closed(ConnId),
}

/// Reads one frame from a byte stream. `Ok(None)` on clean EOF before a
/// header byte.
fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, TransportError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(TransportError::Closed),
            Ok(k) => got += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(header[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME_PAYLOAD {
        return Err(TransportError::FrameTooLarge(len));
    }
    let mut frame = Vec::with_capacity(HEADER_LEN + len);
    frame.extend_from_slice(&header);
    frame.resize(HEADER_LEN + len, 0);
    r.read_exact(&mut frame[HEADER_LEN..])?;
    Ok(Some(frame))
}

/// Client side of one connection.
pub struct ClientConn {
    sink: Box<dyn FrameSink>,
    source: Box<dyn FrameSource>,
    counters: Arc<ByteCounters>,
}

impl ClientConn {
    pub fn counters(&self) -> &Arc<ByteCounters> {
        &self.counters
    }

    pub fn send(&mut self, msg: &Msg) -> Result<(), TransportError> {
        let frame = encode(msg)?;
        self.counters.record_tx(frame.len(), msg.value_bytes());
        self.sink.send_frame(frame)
    }

    /// Blocks until a message arrives. Fails with `Closed` once the server
    /// goes away.
    pub fn recv(&mut self) -> Result<Msg, TransportError> {
        let frame = self.source.recv_frame()?.ok_or(TransportError::Closed)?;
        let msg = decode(&frame)?;
        self.counters.record_rx(frame.len(), msg.value_bytes());
        Ok(msg)
    }

    pub fn request(&mut self, msg: &Msg) -> Result<Msg, TransportError> {
        self.send(msg)?;
        self.recv()
    }
}

impl Drop for ClientConn {
    fn drop(&mut self) {
        self.sink.close();
    }
}

struct ChannelSink(Sender<Vec<u8>>);

impl FrameSink for ChannelSink {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<(), TransportError> {
        self.0.send(frame).map_err(|_| TransportError::Closed)
    }
}

struct ChannelSource(Receiver<Vec<u8>>);

impl FrameSource for ChannelSource {
    fn recv_frame(&mut self) -> Result<Option<Vec<u8>>, TransportError> {
        Ok(self.0.recv().ok())
    }
}

struct InboundSink {
    conn: ConnId,
    tx: Sender<Inbound>,
    closed: bool,
}

impl FrameSink for InboundSink {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<(), TransportError> {
        self.tx
            .send(Inbound::Frame(self.conn, frame))
            .map_err(|_| TransportError::Closed)
    }

    fn close(&mut self) {
        if !self.closed {
            self.closed = true;
            let _ = self.tx.send(Inbound::Closed(self.conn));
        }
    }
}

struct TcpSink(TcpStream);

impl FrameSink for TcpSink {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<(), TransportError> {
        self.0.write_all(&frame).map_err(|e| match e.kind() {
            std::io::ErrorKind::BrokenPipe | std::io::ErrorKind::ConnectionReset => {
                TransportError::Closed
            }
            _ => e.into(),
        })
    }

    fn close(&mut self) {
        let _ = self.0.shutdown(Shutdown::Both);
    }
}

struct TcpSource(BufReader<TcpStream>);

impl FrameSource for TcpSource {
    fn recv_frame(&mut self) -> Result<Option<Vec<u8>>, TransportError> {
        match read_frame(&mut self.0) {
            Err(TransportError::Io(e)) if e.kind() == std::io::ErrorKind::ConnectionReset => {
                Ok(None)
            }
            other => other,
        }
    }
}

/// Handle for opening in-process connections to a [`Server`].
#[derive(Clone)]
pub struct InProcConnector {
    tx: Sender<Inbound>,
    next_id: Arc<AtomicU64>,
}

impl InProcConnector {
    pub fn connect(&self, counters: Arc<ByteCounters>) -> Result<ClientConn, TransportError> {
        let conn = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (reply_tx, reply_rx) = mpsc::channel();
        self.tx
            .send(Inbound::Opened(conn, Box::new(ChannelSink(reply_tx))))
            .map_err(|_| TransportError::Closed)?;
        Ok(ClientConn {
            sink: Box::new(InboundSink {
                conn,
                tx: self.tx.clone(),
                closed: false,
            }),
            source: Box::new(ChannelSource(reply_rx)),
            counters,
        })
    }
}

/// Connects over TCP, retrying until `wait` elapses so that peers started
/// in any order can find each other.
pub fn tcp_connect<A: ToSocketAddrs>(
    addr: A,
    counters: Arc<ByteCounters>,
    wait: Duration,
) -> Result<ClientConn, TransportError> {
    let deadline = Instant::now() + wait;
    let stream = loop {
        match TcpStream::connect(&addr) {
            Ok(s) => break s,
            Err(e) if Instant::now() >= deadline => return Err(e.into()),
            Err(_) => std::thread::sleep(Duration::from_millis(20)),
        }
    };
    stream.set_nodelay(true)?;
    let reader = stream.try_clone()?;
    Ok(ClientConn {
        sink: Box::new(TcpSink(stream)),
        source: Box::new(TcpSource(BufReader::with_capacity(1 << 16, reader))),
        counters,
    })
}

/// What a server observes on its inbox.
#[derive(Debug)]
pub enum Incoming {
    Opened(ConnId),
    Message(ConnId, Msg),
    Closed(ConnId),
}

struct TcpAcceptor {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

/// Single-threaded server endpoint: all connections feed one inbox, and
/// replies go out on the connection a message arrived on.
pub struct Server {
    tx: Sender<Inbound>,
    rx: Receiver<Inbound>,
    next_id: Arc<AtomicU64>,
    conns: HashMap<ConnId, Box<dyn FrameSink>>,
    counters: Arc<ByteCounters>,
    acceptor: Option<TcpAcceptor>,
}

impl Server {
    pub fn in_proc(counters: Arc<ByteCounters>) -> Self {
        let (tx, rx) = mpsc::channel();
        Self {
            tx,
            rx,
            next_id: Arc::new(AtomicU64::new(0)),
            conns: HashMap::new(),
            counters,
            acceptor: None,
        }
    }

    pub fn connector(&self) -> InProcConnector {
        InProcConnector {
            tx: self.tx.clone(),
            next_id: Arc::clone(&self.next_id),
        }
    }

    /// Binds a TCP listener; use port 0 for an ephemeral port.
    pub fn bind_tcp<A: ToSocketAddrs>(
        addr: A,
        counters: Arc<ByteCounters>,
    ) -> Result<(Self, SocketAddr), TransportError> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let mut server = Self::in_proc(counters);
        let stop = Arc::new(AtomicBool::new(false));
        let tx = server.tx.clone();
        let next_id = Arc::clone(&server.next_id);
        let flag = Arc::clone(&stop);
        let handle = std::thread::Builder::new()
            .name(format!("accept-{}", local.port()))
            .spawn(move || accept_loop(listener, tx, next_id, flag))?;
        server.acceptor = Some(TcpAcceptor {
            stop,
            handle: Some(handle),
        });
        Ok((server, local))
    }

    pub fn counters(&self) -> &Arc<ByteCounters> {
        &self.counters
    }

    pub fn open_connections(&self) -> usize {
        self.conns.len()
    }

    /// Waits up to `timeout` for the next event; `Ok(None)` on timeout.
    pub fn next(&mut self, timeout: Duration) -> Result<Option<Incoming>, TransportError> {
        let inbound = match self.rx.recv_timeout(timeout) {
            Ok(i) => i,
            Err(RecvTimeoutError::Timeout) => return Ok(None),
            Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Closed),
        };
        Ok(Some(match inbound {
            Inbound::Opened(conn, sink) => {
                self.conns.insert(conn, sink);
                Incoming::Opened(conn)
            }
            Inbound::Closed(conn) => {
                if let Some(mut s) = self.conns.remove(&conn) {
                    s.close();
                }
                Incoming::Closed(conn)
            }
            Inbound::Frame(conn, frame) => {
                let msg = decode(&frame).map_err(|err| TransportError::PeerDecode { conn, err })?;
                self.counters.record_rx(frame.len(), msg.value_bytes());
                Incoming::Message(conn, msg)
            }
        }))
    }

    pub fn reply(&mut self, conn: ConnId, msg: &Msg) -> Result<(), TransportError> {
        let sink = self
            .conns
            .get_mut(&conn)
            .ok_or(TransportError::UnknownConn(conn))?;
        let frame = encode(msg)?;
        self.counters.record_tx(frame.len(), msg.value_bytes());
        sink.send_frame(frame)
    }

    /// Drops one connection, which makes the client's next `recv` fail.
    pub fn disconnect(&mut self, conn: ConnId) {
        if let Some(mut s) = self.conns.remove(&conn) {
            s.close();
        }
    }

    pub fn shutdown(&mut self) {
        if let Some(mut a) = self.acceptor.take() {
            a.stop.store(true, Ordering::Relaxed);
            if let Some(h) = a.handle.take() {
                let _ = h.join();
            }
        }
        for (_, mut s) in self.conns.drain() {
            s.close();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(
    listener: TcpListener,
    tx: Sender<Inbound>,
    next_id: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
) {
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                if stream.set_nonblocking(false).is_err() || stream.set_nodelay(true).is_err() {
                    continue;
                }
                let Ok(writer) = stream.try_clone() else { continue };
                let conn = next_id.fetch_add(1, Ordering::Relaxed);
                if tx.send(Inbound::Opened(conn, Box::new(TcpSink(writer)))).is_err() {
                    return;
                }
                let tx = tx.clone();
                let spawned = std::thread::Builder::new()
                    .name(format!("conn-{conn}"))
                    .spawn(move || {
                        let mut reader = BufReader::with_capacity(1 << 16, stream);
                        while let Ok(Some(frame)) = read_frame(&mut reader) {
                            if tx.send(Inbound::Frame(conn, frame)).is_err() {
                                return;
                            }
                        }
                        let _ = tx.send(Inbound::Closed(conn));
                    });
                if spawned.is_err() {
                    return;
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(_) => std::thread::sleep(Duration::from_millis(2)),
        }
    }
}
