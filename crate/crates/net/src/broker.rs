//! Embedded control-plane broker. Remote agents connect over TCP, pass the
//! schema-version handshake and are then plain subscribers and publishers on
//! the controller's in-process [`Bus`].

use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use sting_core::control::{Bus, Envelope, SubscriptionId, CONTROL_SCHEMA_VERSION};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::wire::{read_frame, write_frame, Frame};

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug)]
pub struct Broker {
    addr: String,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    thread: Option<JoinHandle<()>>,
}

impl Broker {
    pub fn start(bind: &str, bus: Bus) -> std::io::Result<Broker> {
        let listener = TcpListener::bind(bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?.to_string();
        let stop = Arc::new(AtomicBool::new(false));
        let conns = Arc::new(Mutex::new(Vec::new()));
        let thread = {
            let (stop, conns) = (stop.clone(), conns.clone());
            std::thread::Builder::new()
                .name("broker-accept".into())
                .spawn(move || accept_loop(listener, bus, stop, conns))?
        };
        info!(%addr, "control broker listening");
        Ok(Broker {
            addr,
            stop,
            conns,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> &str {
        &self.addr
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for c in self.conns.lock().expect("conns lock").drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn accept_loop(listener: TcpListener, bus: Bus, stop: Arc<AtomicBool>, conns: Arc<Mutex<Vec<TcpStream>>>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                if let Ok(c) = stream.try_clone() {
                    conns.lock().expect("conns lock").push(c);
                }
                let bus = bus.clone();
                let _ = std::thread::Builder::new()
                    .name(format!("broker-{peer}"))
                    .spawn(move || {
                        if let Err(e) = serve_connection(stream, &bus) {
                            debug!(%peer, error = %e, "broker connection ended");
                        }
                    });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(20)),
            Err(e) => {
                warn!(error = %e, "broker accept failed");
                std::thread::sleep(Duration::from_millis(100));
            }
        }
    }
}

fn serve_connection(stream: TcpStream, bus: &Bus) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream.try_clone()?);
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
    let client_id = match read_frame(&mut reader)? {
        Some(Frame::Hello {
            schema_version,
            client_id,
        }) if schema_version == CONTROL_SCHEMA_VERSION => client_id,
        Some(Frame::Hello { schema_version, .. }) => {
            write_frame(
                &mut writer,
                &Frame::Reject {
                    schema_version: CONTROL_SCHEMA_VERSION,
                    reason: format!("schema version {schema_version} not supported"),
                },
            )?;
            return Ok(());
        }
        _ => {
            write_frame(
                &mut writer,
                &Frame::Reject {
                    schema_version: CONTROL_SCHEMA_VERSION,
                    reason: "expected hello".into(),
                },
            )?;
            return Ok(());
        }
    };
    stream.set_read_timeout(None)?;
    write_frame(
        &mut writer,
        &Frame::Welcome {
            schema_version: CONTROL_SCHEMA_VERSION,
        },
    )?;
    info!(%client_id, "control client connected");

    // One writer thread per connection keeps bus callbacks non-blocking.
    let (tx, rx) = mpsc::channel::<Frame>();
    let writer_thread = std::thread::spawn(move || {
        for frame in rx {
            if write_frame(&mut writer, &frame).is_err() {
                break;
            }
        }
    });

    let mut subs: HashMap<String, SubscriptionId> = HashMap::new();
    let result = loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        };
        match frame {
            Frame::Subscribe { filter } => {
                if let std::collections::hash_map::Entry::Vacant(slot) = subs.entry(filter) {
                    let tx = tx.clone();
                    let id = bus.subscribe_fn(slot.key(), move |env| {
                        let _ = tx.send(Frame::Deliver { envelope: env.clone() });
                    });
                    slot.insert(id);
                }
            }
            Frame::Unsubscribe { filter } => {
                if let Some(id) = subs.remove(&filter) {
                    bus.unsubscribe(id);
                }
            }
            Frame::Publish { envelope } if envelope.schema_version == CONTROL_SCHEMA_VERSION => {
                bus.publish(&envelope);
            }
            Frame::Publish { envelope } => {
                warn!(%client_id, version = envelope.schema_version, "dropping envelope with foreign schema version");
            }
            other => warn!(%client_id, ?other, "unexpected frame from client"),
        }
    };
    for id in subs.into_values() {
        bus.unsubscribe(id);
    }
    drop(tx);
    let _ = writer_thread.join();
    info!(%client_id, "control client disconnected");
    result
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("broker rejected the session: {0}")]
    Rejected(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("connection closed")]
    Closed,
}

/// A client session with the broker.
#[derive(Debug)]
pub struct BrokerClient {
    writer: Arc<Mutex<BufWriter<TcpStream>>>,
    stream: TcpStream,
    inbox: mpsc::Receiver<Envelope>,
}

/// Accepts `host:port` or `tcp://host:port`.
pub fn broker_addr(uri: &str) -> &str {
    uri.strip_prefix("tcp://").unwrap_or(uri)
}

impl BrokerClient {
    pub fn connect(uri: &str, client_id: &str) -> Result<BrokerClient, ClientError> {
        Self::connect_with_version(uri, client_id, CONTROL_SCHEMA_VERSION)
    }

    /// Handshake with an explicit schema version; lets tests exercise rejection.
    pub fn connect_with_version(uri: &str, client_id: &str, schema_version: u32) -> Result<BrokerClient, ClientError> {
        let stream = TcpStream::connect(broker_addr(uri))?;
        stream.set_nodelay(true)?;
        let mut writer = BufWriter::new(stream.try_clone()?);
        let mut reader = BufReader::new(stream.try_clone()?);
        write_frame(
            &mut writer,
            &Frame::Hello {
                schema_version,
                client_id: client_id.to_string(),
            },
        )?;
        stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
        match read_frame(&mut reader)? {
            Some(Frame::Welcome { .. }) => {}
            Some(Frame::Reject { reason, .. }) => return Err(ClientError::Rejected(reason)),
            Some(other) => return Err(ClientError::Protocol(format!("unexpected {other:?}"))),
            None => return Err(ClientError::Closed),
        }
        stream.set_read_timeout(None)?;
        let (tx, rx) = mpsc::channel();
        std::thread::Builder::new()
            .name(format!("broker-client-{client_id}"))
            .spawn(move || {
                while let Ok(Some(frame)) = read_frame(&mut reader) {
                    if let Frame::Deliver { envelope } = frame {
                        if tx.send(envelope).is_err() {
                            break;
                        }
                    }
                }
            })?;
        Ok(BrokerClient {
            writer: Arc::new(Mutex::new(writer)),
            stream,
            inbox: rx,
        })
    }

    fn send(&self, frame: &Frame) -> Result<(), ClientError> {
        write_frame(&mut *self.writer.lock().expect("writer lock"), frame)?;
        Ok(())
    }

    pub fn subscribe(&self, filter: &str) -> Result<(), ClientError> {
        self.send(&Frame::Subscribe { filter: filter.into() })
    }

    pub fn unsubscribe(&self, filter: &str) -> Result<(), ClientError> {
        self.send(&Frame::Unsubscribe { filter: filter.into() })
    }

    pub fn publish(&self, envelope: &Envelope) -> Result<(), ClientError> {
        self.send(&Frame::Publish {
            envelope: envelope.clone(),
        })
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Envelope>, ClientError> {
        match self.inbox.recv_timeout(timeout) {
            Ok(env) => Ok(Some(env)),
            Err(mpsc::RecvTimeoutError::Timeout) => Ok(None),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(ClientError::Closed),
        }
    }

    pub fn try_recv(&self) -> Result<Option<Envelope>, ClientError> {
        match self.inbox.try_recv() {
            Ok(env) => Ok(Some(env)),
            Err(mpsc::TryRecvError::Empty) => Ok(None),
            Err(mpsc::TryRecvError::Disconnected) => Err(ClientError::Closed),
        }
    }
}

impl Drop for BrokerClient {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// How a runtime exchanges envelopes with the control plane.
pub trait ControlLink: Send {
    /// Next pending envelope, if any.
    fn try_recv(&mut self) -> Option<Envelope>;

    fn publish(&mut self, env: &Envelope);
}

/// Direct attachment to an in-process bus.
#[derive(Debug)]
pub struct BusLink {
    bus: Bus,
    subs: Vec<SubscriptionId>,
    inbox: mpsc::Receiver<Envelope>,
}

impl BusLink {
    pub fn new(bus: &Bus, filters: &[String]) -> BusLink {
        let (tx, rx) = mpsc::channel();
        let subs = filters
            .iter()
            .map(|f| {
                let tx = tx.clone();
                bus.subscribe_fn(f, move |env| {
                    let _ = tx.send(env.clone());
                })
            })
            .collect();
        BusLink {
            bus: bus.clone(),
            subs,
            inbox: rx,
        }
    }
}

impl Drop for BusLink {
    fn drop(&mut self) {
        for id in self.subs.drain(..) {
            self.bus.unsubscribe(id);
        }
    }
}

impl ControlLink for BusLink {
    fn try_recv(&mut self) -> Option<Envelope> {
        self.inbox.try_recv().ok()
    }

    fn publish(&mut self, env: &Envelope) {
        self.bus.publish(env);
    }
}

/// Broker session that reconnects with a fixed backoff and resubscribes.
/// Envelopes published while disconnected are dropped; agents repeat their
/// status on every heartbeat.
#[derive(Debug)]
pub struct ReconnectingClient {
    uri: String,
    client_id: String,
    filters: Vec<String>,
    client: Option<BrokerClient>,
    next_attempt: Instant,
    backoff: Duration,
}

impl ReconnectingClient {
    /// Connects once eagerly so configuration errors surface immediately.
    pub fn connect(uri: &str, client_id: &str, filters: Vec<String>) -> Result<Self, ClientError> {
        let mut c = ReconnectingClient {
            uri: uri.to_string(),
            client_id: client_id.to_string(),
            filters,
            client: None,
            next_attempt: Instant::now(),
            backoff: Duration::from_secs(1),
        };
        c.client = Some(c.open()?);
        Ok(c)
    }

    pub fn is_connected(&self) -> bool {
        self.client.is_some()
    }

    fn open(&self) -> Result<BrokerClient, ClientError> {
        let client = BrokerClient::connect(&self.uri, &self.client_id)?;
        for f in &self.filters {
            client.subscribe(f)?;
        }
        Ok(client)
    }

    fn ensure(&mut self) -> Option<&BrokerClient> {
        if self.client.is_none() && Instant::now() >= self.next_attempt {
            match self.open() {
                Ok(c) => {
                    info!(uri = %self.uri, "reconnected to broker");
                    self.client = Some(c);
                }
                Err(e) => {
                    debug!(error = %e, "broker reconnect failed");
                    self.next_attempt = Instant::now() + self.backoff;
                }
            }
        }
        self.client.as_ref()
    }

    fn lost(&mut self) {
        warn!(uri = %self.uri, "lost broker connection");
        self.client = None;
        self.next_attempt = Instant::now() + self.backoff;
    }
}

impl ControlLink for ReconnectingClient {
    fn try_recv(&mut self) -> Option<Envelope> {
        match self.ensure()?.try_recv() {
            Ok(env) => env,
            Err(_) => {
                self.lost();
                None
            }
        }
    }

    fn publish(&mut self, env: &Envelope) {
        let Some(c) = self.ensure() else { return };
        if c.publish(env).is_err() {
            self.lost();
        }
    }
}
