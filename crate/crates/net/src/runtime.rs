//! Real-time drivers. One thread per agent (or collector) runs the control
//! handlers, the departure schedule and the receive path in a single loop,
//! so metrics need no locking.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Serialize;
use sting_core::agent::{Agent, AgentConfig};
use sting_core::channel::Datagram;
use sting_core::collector::Collector;
use sting_core::control::{topic, Envelope};
use sting_core::dataplane::Node;
use tracing::{debug, warn};

use crate::broker::ControlLink;
use crate::udp::WaitTransport;

/// Longest blocking wait, bounding control-message latency.
pub const MAX_WAIT: Duration = Duration::from_millis(2);

/// A sans-IO state machine the loop can drive.
pub trait Actor: Send {
    fn handle(&mut self, env: &Envelope, now_ns: u64) -> Vec<Envelope>;
    fn tick(&mut self, now_ns: u64) -> Vec<Envelope>;
    fn next_wakeup_ns(&self) -> Option<u64>;
    fn node(&mut self) -> Option<&mut Node>;
}

impl Actor for Agent {
    fn handle(&mut self, env: &Envelope, now_ns: u64) -> Vec<Envelope> {
        Agent::handle(self, env, now_ns)
    }
    fn tick(&mut self, now_ns: u64) -> Vec<Envelope> {
        Agent::tick(self, now_ns)
    }
    fn next_wakeup_ns(&self) -> Option<u64> {
        Some(Agent::next_wakeup_ns(self))
    }
    fn node(&mut self) -> Option<&mut Node> {
        self.data_plane_mut()
    }
}

impl Actor for Collector {
    fn handle(&mut self, env: &Envelope, now_ns: u64) -> Vec<Envelope> {
        Collector::handle(self, env, now_ns)
    }
    fn tick(&mut self, now_ns: u64) -> Vec<Envelope> {
        Collector::tick(self, now_ns)
    }
    fn next_wakeup_ns(&self) -> Option<u64> {
        Collector::next_wakeup_ns(self)
    }
    fn node(&mut self) -> Option<&mut Node> {
        self.data_plane_mut()
    }
}

/// Departure-timing and I/O counters of one runtime.
#[derive(Debug, Default)]
pub struct RuntimeStats {
    departures: AtomicU64,
    late_over_1ms: AtomicU64,
    lateness_sum_ns: AtomicU64,
    max_lateness_ns: AtomicU64,
    send_errors: AtomicU64,
    received: AtomicU64,
    dropped_idle: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StatsSnapshot {
    pub departures: u64,
    /// Departures sent more than 1 ms after their scheduled time.
    pub late_over_1ms: u64,
    pub mean_lateness_ns: u64,
    pub max_lateness_ns: u64,
    pub send_errors: u64,
    pub received: u64,
    /// Datagrams that arrived while no step was running.
    pub dropped_idle: u64,
}

impl RuntimeStats {
    fn departed(&self, lateness_ns: u64) {
        self.departures.fetch_add(1, Ordering::Relaxed);
        self.lateness_sum_ns.fetch_add(lateness_ns, Ordering::Relaxed);
        self.max_lateness_ns.fetch_max(lateness_ns, Ordering::Relaxed);
        if lateness_ns > 1_000_000 {
            self.late_over_1ms.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        let departures = self.departures.load(Ordering::Relaxed);
        StatsSnapshot {
            departures,
            late_over_1ms: self.late_over_1ms.load(Ordering::Relaxed),
            mean_lateness_ns: self.lateness_sum_ns.load(Ordering::Relaxed).checked_div(departures).unwrap_or(0),
            max_lateness_ns: self.max_lateness_ns.load(Ordering::Relaxed),
            send_errors: self.send_errors.load(Ordering::Relaxed),
            received: self.received.load(Ordering::Relaxed),
            dropped_idle: self.dropped_idle.load(Ordering::Relaxed),
        }
    }
}

/// Owns a running loop; dropping it stops the loop and joins the thread.
#[derive(Debug)]
pub struct RuntimeHandle {
    name: String,
    stop: Arc<AtomicBool>,
    stats: Arc<RuntimeStats>,
    thread: Option<JoinHandle<()>>,
}

impl RuntimeHandle {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(JoinHandle::is_finished)
    }

    /// Flag the loop to stop without waiting for it.
    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn stop(mut self) -> StatsSnapshot {
        self.shutdown();
        self.stats()
    }

    /// Blocks until the loop ends on its own or `stop_flag` is raised.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }
}

impl Drop for RuntimeHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Control topics an agent listens on.
pub fn agent_filters(device_id: &str) -> Vec<String> {
    vec![topic::agent_config(device_id), topic::agent_command(device_id)]
}

pub fn collector_filters() -> Vec<String> {
    vec![topic::COLLECTOR_COMMAND.to_string()]
}

/// Starts an agent on `transport`. An empty `cfg.data_addr` is replaced by
/// the transport's local address.
pub fn spawn_agent<T, L>(mut cfg: AgentConfig, transport: T, link: L) -> std::io::Result<RuntimeHandle>
where
    T: WaitTransport + 'static,
    L: ControlLink + 'static,
{
    if cfg.data_addr.is_empty() {
        cfg.data_addr = transport.local_addr();
    }
    let name = cfg.device_id.clone();
    let agent = Agent::new(cfg, transport.now_ns())?;
    spawn_actor(name, agent, transport, link)
}

pub fn spawn_collector<T, L>(transport: T, link: L) -> std::io::Result<RuntimeHandle>
where
    T: WaitTransport + 'static,
    L: ControlLink + 'static,
{
    let collector = Collector::new(transport.local_addr());
    spawn_actor("collector".into(), collector, transport, link)
}

pub fn spawn_actor<A, T, L>(name: String, actor: A, transport: T, link: L) -> std::io::Result<RuntimeHandle>
where
    A: Actor + 'static,
    T: WaitTransport + 'static,
    L: ControlLink + 'static,
{
    let stop = Arc::new(AtomicBool::new(false));
    let stats = Arc::new(RuntimeStats::default());
    let thread = {
        let (stop, stats) = (stop.clone(), stats.clone());
        std::thread::Builder::new()
            .name(format!("rt-{name}"))
            .spawn(move || drive(actor, transport, link, &stop, &stats))?
    };
    Ok(RuntimeHandle {
        name,
        stop,
        stats,
        thread: Some(thread),
    })
}

fn publish_all(link: &mut impl ControlLink, out: Vec<Envelope>) {
    for env in out {
        link.publish(&env);
    }
}

fn deliver<A: Actor, T: WaitTransport>(actor: &mut A, transport: &mut T, d: Datagram, stats: &RuntimeStats) {
    stats.received.fetch_add(1, Ordering::Relaxed);
    let now = transport.now_ns();
    let Some(node) = actor.node() else {
        stats.dropped_idle.fetch_add(1, Ordering::Relaxed);
        return;
    };
    if let Some(reply) = node.on_datagram(&d.src, &d.bytes, d.wire_bytes, d.rx_ns, now) {
        if let Err(e) = transport.send_probe(&reply.dst, &reply.header, reply.wire_bytes) {
            stats.send_errors.fetch_add(1, Ordering::Relaxed);
            debug!(error = %e, "echo reply failed");
        }
    }
}

fn send_due<A: Actor, T: WaitTransport>(actor: &mut A, transport: &mut T, stats: &RuntimeStats) {
    let Some(node) = actor.node() else { return };
    loop {
        let now = transport.now_ns();
        let Some(due) = node.next_departure_ns().filter(|&t| t <= now) else { return };
        let Some(out) = node.poll_departure(now) else { return };
        stats.departed(now - due);
        if let Err(e) = transport.send_probe(&out.dst, &out.header, out.wire_bytes) {
            stats.send_errors.fetch_add(1, Ordering::Relaxed);
            debug!(error = %e, dst = %out.dst, "send failed");
        }
    }
}

fn drive<A: Actor, T: WaitTransport, L: ControlLink>(
    mut actor: A,
    mut transport: T,
    mut link: L,
    stop: &AtomicBool,
    stats: &RuntimeStats,
) {
    while !stop.load(Ordering::SeqCst) {
        while let Some(env) = link.try_recv() {
            let out = actor.handle(&env, transport.now_ns());
            publish_all(&mut link, out);
        }
        loop {
            match transport.try_recv() {
                Ok(Some(d)) => deliver(&mut actor, &mut transport, d, stats),
                Ok(None) => break,
                Err(e) => {
                    warn!(error = %e, "receive failed");
                    break;
                }
            }
        }
        send_due(&mut actor, &mut transport, stats);
        let out = actor.tick(transport.now_ns());
        publish_all(&mut link, out);

        let now = transport.now_ns();
        let next = [actor.next_wakeup_ns(), actor.node().and_then(|n| n.next_departure_ns())]
            .into_iter()
            .flatten()
            .min();
        let wait = next.map_or(MAX_WAIT, |t| Duration::from_nanos(t.saturating_sub(now)).min(MAX_WAIT));
        if wait.is_zero() {
            continue;
        }
        match transport.recv_timeout(wait) {
            Ok(Some(d)) => deliver(&mut actor, &mut transport, d, stats),
            Ok(None) => {}
            Err(e) => {
                warn!(error = %e, "receive failed");
                std::thread::sleep(wait);
            }
        }
    }
}
