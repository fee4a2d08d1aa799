//! Control-plane server. One port serves both framings: a connection whose
//! first bytes are `GET ` is upgraded to WebSocket, anything else speaks the
//! length-prefixed protocol.
//!
//! Nothing here ever blocks the engine: every connection has a bounded
//! outbound queue, and a connection whose queue overflows is shut down.

use std::io::{self, BufReader, BufWriter, Read};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, SendTimeoutError, Sender, TrySendError};
use log::{debug, info, warn};
use serde_json::Value;
use tungstenite::Message;

use super::protocol::{read_frame, write_frame, ControlMessage, FrameDecoder, ErrorCode, Reply, ReplyError, ServerMessage};
use crate::engine::MetricsFrame;
use crate::error::{Error, Result};

pub const DEFAULT_QUEUE_CAPACITY: usize = 256;
const POLL: Duration = Duration::from_millis(10);
const WRITE_TIMEOUT: Duration = Duration::from_secs(2);
const INBOUND_TIMEOUT: Duration = Duration::from_secs(1);
const LINGER: Duration = Duration::from_millis(250);

struct Conn {
    id: u64,
    peer: Option<SocketAddr>,
    stream: TcpStream,
    closed: AtomicBool,
    draining: AtomicBool,
}

impl Conn {
    fn close(&self) {
        if !self.closed.swap(true, Ordering::SeqCst) {
            debug!("closing control connection {} ({:?})", self.id, self.peer);
            let _ = self.stream.shutdown(Shutdown::Both);
        }
    }

    fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    /// Stops reading; the writer flushes what is queued, then closes.
    fn drain(&self) {
        self.draining.store(true, Ordering::SeqCst);
    }

    fn is_draining(&self) -> bool {
        self.draining.load(Ordering::SeqCst)
    }
}

/// Sending half of one connection's outbound queue.
#[derive(Clone)]
pub struct Outbox {
    tx: Sender<Arc<str>>,
    conn: Arc<Conn>,
}

impl Outbox {
    pub fn connection_id(&self) -> u64 {
        self.conn.id
    }

    pub fn is_closed(&self) -> bool {
        self.conn.is_closed()
    }

    /// Queues without blocking. A full queue means the client has stalled:
    /// the connection is shut down and `false` returned.
    pub fn push(&self, json: Arc<str>) -> bool {
        if self.conn.is_closed() {
            return false;
        }
        match self.tx.try_send(json) {
            Ok(()) => true,
            Err(TrySendError::Full(_)) => {
                warn!("control client {} stalled; disconnecting", self.conn.id);
                self.conn.close();
                false
            }
            Err(TrySendError::Disconnected(_)) => {
                self.conn.close();
                false
            }
        }
    }

    pub fn send(&self, msg: &ServerMessage) -> bool {
        self.push(msg.to_json().into())
    }

    pub fn reply(&self, reply: Reply) -> bool {
        self.send(&ServerMessage::Reply(reply))
    }
}

/// A request on its way to the scheduler, with the way back.
pub struct Inbound {
    pub message: ControlMessage,
    pub outbox: Outbox,
}

#[derive(Default)]
pub struct MetricsHub {
    subscribers: Mutex<Vec<Outbox>>,
    published: AtomicU64,
    dropped: AtomicU64,
}

impl MetricsHub {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn subscribe(&self, outbox: Outbox) {
        let mut subs = self.subscribers.lock().expect("hub lock");
        if !subs.iter().any(|s| s.connection_id() == outbox.connection_id()) {
            subs.push(outbox);
        }
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.lock().expect("hub lock").len()
    }

    /// Frames offered to subscribers so far.
    pub fn published(&self) -> u64 {
        self.published.load(Ordering::Relaxed)
    }

    /// Subscribers dropped for stalling or disconnecting.
    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    /// Serializes once and offers the frame to every subscriber without
    /// blocking.
    pub fn publish(&self, frame: &MetricsFrame) {
        self.published.fetch_add(1, Ordering::Relaxed);
        let mut subs = self.subscribers.lock().expect("hub lock");
        if subs.is_empty() {
            return;
        }
        let json: Arc<str> = ServerMessage::Metrics(*frame).to_json().into();
        let before = subs.len();
        subs.retain(|s| s.push(json.clone()));
        self.dropped.fetch_add((before - subs.len()) as u64, Ordering::Relaxed);
    }
}

pub struct ControlServer {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<Weak<Conn>>>>,
    accept: Option<JoinHandle<()>>,
}

impl ControlServer {
    /// Binds and starts accepting. Requests go to `inbound` in arrival order.
    pub fn start(addr: impl ToSocketAddrs, inbound: Sender<Inbound>, queue_capacity: usize) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::io("binding control listener", e))?;
        let local_addr = listener.local_addr().map_err(|e| Error::io("control listener address", e))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::io("configuring control listener", e))?;
        info!("control plane listening on {local_addr}");
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<Weak<Conn>>>> = Arc::default();
        let accept = {
            let stop = stop.clone();
            let conns = conns.clone();
            thread::Builder::new()
                .name("vivo-control-accept".into())
                .spawn(move || accept_loop(listener, inbound, queue_capacity, stop, conns))
                .map_err(|e| Error::io("spawning accept thread", e))?
        };
        Ok(Self {
            local_addr,
            stop,
            conns,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn connection_count(&self) -> usize {
        let conns = self.conns.lock().expect("conn lock");
        conns.iter().filter_map(Weak::upgrade).filter(|c| !c.is_closed()).count()
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let conns: Vec<Arc<Conn>> = self
            .conns
            .lock()
            .expect("conn lock")
            .drain(..)
            .filter_map(|c| c.upgrade())
            .collect();
        for c in &conns {
            c.drain();
        }
        let deadline = Instant::now() + WRITE_TIMEOUT + LINGER;
        while Instant::now() < deadline && conns.iter().any(|c| !c.is_closed()) {
            thread::sleep(POLL);
        }
        for c in &conns {
            c.close();
        }
    }
}

impl Drop for ControlServer {
    fn drop(&mut self) {
        self.stop_now();
    }
}

fn accept_loop(
    listener: TcpListener,
    inbound: Sender<Inbound>,
    capacity: usize,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<Weak<Conn>>>>,
) {
    let mut next_id = 0u64;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                next_id += 1;
                let id = next_id;
                let inbound = inbound.clone();
                let conns = conns.clone();
                let spawned = thread::Builder::new()
                    .name(format!("vivo-control-{id}"))
                    .spawn(move || {
                        if let Err(e) = serve_connection(id, stream, peer, inbound, capacity, conns) {
                            debug!("control connection {id} ended: {e}");
                        }
                    });
                if let Err(e) = spawned {
                    warn!("could not spawn connection thread: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

fn serve_connection(
    id: u64,
    stream: TcpStream,
    peer: SocketAddr,
    inbound: Sender<Inbound>,
    capacity: usize,
    conns: Arc<Mutex<Vec<Weak<Conn>>>>,
) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_write_timeout(Some(WRITE_TIMEOUT))?;
    let conn = Arc::new(Conn {
        id,
        peer: Some(peer),
        stream: stream.try_clone()?,
        closed: AtomicBool::new(false),
        draining: AtomicBool::new(false),
    });
    {
        let mut c = conns.lock().expect("conn lock");
        c.retain(|w| w.strong_count() > 0);
        c.push(Arc::downgrade(&conn));
    }
    let (tx, rx) = crossbeam_channel::bounded::<Arc<str>>(capacity);
    let outbox = Outbox { tx, conn: conn.clone() };

    // Wait until the first bytes decide the framing.
    let mut head = [0u8; 4];
    let websocket = loop {
        let n = stream.peek(&mut head)?;
        if n == 0 {
            return Ok(());
        }
        if !b"GET ".starts_with(&head[..n]) {
            break false;
        }
        if n == 4 {
            break true;
        }
        thread::sleep(POLL);
    };
    let result = if websocket {
        serve_websocket(stream, &conn, outbox, rx, inbound)
    } else {
        serve_framed(stream, &conn, outbox, rx, inbound)
    };
    conn.close();
    result
}

fn dispatch(text: &str, outbox: &Outbox, inbound: &Sender<Inbound>) {
    match ControlMessage::parse(text) {
        Ok(message) => {
            let request_id = message.request_id.clone();
            let req = Inbound {
                message,
                outbox: outbox.clone(),
            };
            match inbound.send_timeout(req, INBOUND_TIMEOUT) {
                Ok(()) => {}
                Err(SendTimeoutError::Timeout(_)) => {
                    outbox.reply(Reply::error(
                        request_id,
                        ReplyError::new(ErrorCode::Unavailable, "engine busy; command not applied"),
                    ));
                }
                Err(SendTimeoutError::Disconnected(_)) => {
                    outbox.reply(Reply::error(
                        request_id,
                        ReplyError::new(ErrorCode::Unavailable, "engine not running"),
                    ));
                }
            }
        }
        Err(reply) => {
            outbox.reply(reply);
        }
    }
}

fn serve_framed(
    mut stream: TcpStream,
    conn: &Arc<Conn>,
    outbox: Outbox,
    rx: Receiver<Arc<str>>,
    inbound: Sender<Inbound>,
) -> io::Result<()> {
    let write_half = stream.try_clone()?;
    let writer_conn = conn.clone();
    let writer = thread::Builder::new()
        .name(format!("vivo-control-{}-tx", conn.id))
        .spawn(move || {
            let mut out = BufWriter::new(write_half);
            loop {
                match rx.recv_timeout(POLL) {
                    Ok(msg) => {
                        if writer_conn.is_closed() || write_frame(&mut out, &msg).is_err() {
                            writer_conn.close();
                            return;
                        }
                    }
                    Err(RecvTimeoutError::Timeout) if !writer_conn.is_draining() && !writer_conn.is_closed() => {}
                    Err(_) => return,
                }
            }
        })?;
    stream.set_read_timeout(Some(POLL))?;
    let mut decoder = FrameDecoder::default();
    let mut chunk = [0u8; 8192];
    let result = 'read: loop {
        if conn.is_closed() || conn.is_draining() {
            break Ok(());
        }
        match stream.read(&mut chunk) {
            Ok(0) => break Ok(()),
            Ok(n) => decoder.feed(&chunk[..n]),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => break Err(e),
        }
        loop {
            match decoder.next_frame() {
                Ok(Some(text)) => dispatch(&text, &outbox, &inbound),
                Ok(None) => break,
                Err(e) => {
                    outbox.reply(Reply::error(Value::Null, ReplyError::schema(e.to_string())));
                    conn.draining.store(true, Ordering::SeqCst);
                    break 'read Err(e);
                }
            }
        }
    };
    drop(outbox);
    if conn.is_draining() && !conn.is_closed() {
        let _ = writer.join();
        linger_close(&mut stream, conn);
    } else {
        conn.close();
        let _ = writer.join();
    }
    result
}

/// Half-closes after everything queued has been written, then discards
/// input briefly so the peer sees a clean end of stream instead of a reset.
fn linger_close(stream: &mut TcpStream, conn: &Conn) {
    if !conn.is_closed() {
        let _ = stream.shutdown(Shutdown::Write);
        let _ = stream.set_read_timeout(Some(POLL));
        let until = Instant::now() + LINGER;
        let mut sink = [0u8; 4096];
        while Instant::now() < until {
            match stream.read(&mut sink) {
                Ok(0) => break,
                Ok(_) => {}
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                Err(_) => break,
            }
        }
    }
    conn.close();
}

fn serve_websocket(
    stream: TcpStream,
    conn: &Arc<Conn>,
    outbox: Outbox,
    rx: Receiver<Arc<str>>,
    inbound: Sender<Inbound>,
) -> io::Result<()> {
    let mut ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    loop {
        if conn.is_closed() {
            let _ = ws.close(None);
            return Ok(());
        }
        while let Ok(msg) = rx.try_recv() {
            if let Err(e) = ws.send(Message::Text(msg.to_string())) {
                return Err(io::Error::other(e.to_string()));
            }
        }
        if conn.is_draining() {
            let _ = ws.close(None);
            let _ = ws.flush();
            linger_close(ws.get_mut(), conn);
            return Ok(());
        }
        match ws.read() {
            Ok(Message::Text(text)) => dispatch(&text, &outbox, &inbound),
            Ok(Message::Binary(bytes)) => match String::from_utf8(bytes) {
                Ok(text) => dispatch(&text, &outbox, &inbound),
                Err(_) => {
                    outbox.reply(Reply::error(Value::Null, ReplyError::schema("binary frame is not UTF-8")));
                }
            },
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) => return Err(io::Error::other(e.to_string())),
        }
    }
}

/// Blocking client for the length-prefixed protocol, for tools and tests.
pub struct ControlClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl ControlClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::io("connecting to control plane", e))?;
        stream.set_nodelay(true).map_err(|e| Error::io("configuring client socket", e))?;
        let w = stream.try_clone().map_err(|e| Error::io("cloning client socket", e))?;
        Ok(Self {
            reader: BufReader::new(stream),
            writer: BufWriter::new(w),
        })
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> Result<()> {
        self.reader
            .get_ref()
            .set_read_timeout(t)
            .map_err(|e| Error::io("setting read timeout", e))
    }

    pub fn send(&mut self, msg: &ControlMessage) -> Result<()> {
        self.send_raw(&msg.to_json())
    }

    pub fn send_raw(&mut self, json: &str) -> Result<()> {
        write_frame(&mut self.writer, json).map_err(|e| Error::io("sending control message", e))
    }

    /// `Ok(None)` when the server closed the connection.
    pub fn recv(&mut self) -> Result<Option<ServerMessage>> {
        match read_frame(&mut self.reader).map_err(|e| Error::io("reading control message", e))? {
            Some(text) => ServerMessage::parse(&text).map(Some),
            None => Ok(None),
        }
    }

    /// Sends and waits for the matching reply, skipping metrics frames.
    pub fn request(&mut self, msg: &ControlMessage) -> Result<Reply> {
        self.send(msg)?;
        loop {
            match self.recv()? {
                Some(ServerMessage::Reply(r)) if r.request_id == msg.request_id => return Ok(r),
                Some(_) => {}
                None => return Err(Error::InvalidInput("connection closed before reply".into())),
            }
        }
    }
}
