//! Sans-IO data-plane engine shared by agents and the controller-side
//! collector.
//!
//! A [`Node`] owns the merged departure schedule of the flows it sends, one
//! [`FlowMetrics`] per flow it takes part in, and answers echo requests. It
//! never touches a socket: drivers pull [`Outgoing`] packets from it and push
//! received datagrams into it, on either a virtual or a real clock.
//!
//! Every flow has a sender and a receiver. The sender's metrics collect RTT
//! samples from echo replies plus send counters; the receiver's collect
//! throughput, loss, jitter and frame accounting.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::metrics::{FlowMetrics, FlowReport, MetricsConfig, WindowCounters, DEFAULT_WINDOW_NS};
use crate::probe::{PacketType, ProbePacket, HEADER_LEN};
use crate::traffic::{DeviceTrafficProfile, Direction, FlowKind, FlowSpec, Schedule};

/// Size of an echo reply on the wire.
pub const ECHO_REPLY_BYTES: u32 = HEADER_LEN as u32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub device_id: String,
    pub flow_id: u16,
}

impl FlowKey {
    pub fn new(device_id: impl Into<String>, flow_id: u16) -> Self {
        FlowKey {
            device_id: device_id.into(),
            flow_id,
        }
    }
}

/// A packet ready to hand to a transport.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outgoing {
    pub dst: Arc<str>,
    pub header: [u8; HEADER_LEN],
    pub wire_bytes: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStats {
    pub sent_packets: u64,
    pub sent_bytes: u64,
    pub echo_replies_sent: u64,
    pub received: u64,
    pub outside_window: u64,
    pub malformed: u64,
    pub stray: u64,
    /// Packets stamped before this node's start: leftovers of an earlier step.
    pub stale: u64,
    pub first_tx_ns: Option<u64>,
    pub last_tx_ns: Option<u64>,
    /// Worst delay between a scheduled departure and the actual send.
    pub max_lateness_ns: u64,
}

/// A tumbling window that closed during the run, for live views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEvent {
    pub device_id: String,
    pub flow_id: u16,
    pub window_index: usize,
    pub window_start_ns: u64,
    pub counters: WindowCounters,
    pub throughput_bps: f64,
}

/// The data-plane peer of one device as seen by a node.
#[derive(Debug, Clone)]
pub struct Peer {
    pub device_id: String,
    pub data_addr: String,
    pub profile: DeviceTrafficProfile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Agent,
    Collector,
}

#[derive(Debug)]
struct Tracked {
    key: FlowKey,
    metrics: FlowMetrics,
    reported_windows: usize,
}

#[derive(Debug)]
pub struct Node {
    local_addr: Arc<str>,
    start_ns: u64,
    stop_ns: u64,
    schedule: Schedule,
    /// Per schedule flow index: destination, tracked-metrics index, echo period.
    outbound: Vec<(Arc<str>, usize, u32)>,
    tracked: Vec<Tracked>,
    /// Source address to device position in `flow_lookup`.
    peers: HashMap<String, usize>,
    flow_lookup: Vec<HashMap<u16, usize>>,
    stats: NodeStats,
}

fn metrics_config(spec: &FlowSpec, window_ns: u64) -> MetricsConfig {
    MetricsConfig {
        window_ns,
        frame_deadline_ns: (spec.kind == FlowKind::FrameVideo).then(|| (spec.frame_deadline_ms() * 1e6).round() as u64),
        clocks_synchronized: false,
    }
}

impl Node {
    fn build(side: Side, local_addr: &str, peers: &[Peer], start_ns: u64, stop_ns: u64, window_ns: u64) -> Node {
        let mut tracked = Vec::new();
        let mut outbound_specs = Vec::new();
        let mut outbound = Vec::new();
        let mut peer_index = HashMap::new();
        let mut flow_lookup = Vec::new();
        for (device_pos, peer) in peers.iter().enumerate() {
            peer_index.insert(peer.data_addr.clone(), device_pos);
            let dst: Arc<str> = Arc::from(peer.data_addr.as_str());
            let mut lookup = HashMap::new();
            for spec in &peer.profile.flows {
                let idx = tracked.len();
                lookup.insert(spec.flow_id, idx);
                tracked.push(Tracked {
                    key: FlowKey::new(peer.device_id.clone(), spec.flow_id),
                    metrics: FlowMetrics::new(spec.flow_id, start_ns, metrics_config(spec, window_ns)),
                    reported_windows: 0,
                });
                let sends = match (side, spec.direction) {
                    (Side::Agent, Direction::Uplink) | (Side::Collector, Direction::Downlink) => true,
                    (Side::Agent, Direction::Downlink) | (Side::Collector, Direction::Uplink) => false,
                };
                if sends {
                    outbound_specs.push(spec.clone());
                    outbound.push((dst.clone(), idx, spec.echo_every));
                }
            }
            flow_lookup.push(lookup);
        }
        Node {
            local_addr: Arc::from(local_addr),
            start_ns,
            stop_ns,
            schedule: Schedule::new(&outbound_specs),
            outbound,
            tracked,
            peers: peer_index,
            flow_lookup,
            stats: NodeStats::default(),
        }
    }

    /// Data plane of an agent: sends its uplink flows to the collector and
    /// receives its downlink flows from it.
    pub fn for_agent(
        profile: &DeviceTrafficProfile,
        local_addr: &str,
        collector_addr: &str,
        start_ns: u64,
        stop_ns: u64,
    ) -> Node {
        Self::with_window_for_agent(profile, local_addr, collector_addr, start_ns, stop_ns, DEFAULT_WINDOW_NS)
    }

    pub fn with_window_for_agent(
        profile: &DeviceTrafficProfile,
        local_addr: &str,
        collector_addr: &str,
        start_ns: u64,
        stop_ns: u64,
        window_ns: u64,
    ) -> Node {
        let peer = Peer {
            device_id: profile.device_id.clone(),
            data_addr: collector_addr.to_string(),
            profile: profile.clone(),
        };
        Self::build(Side::Agent, local_addr, &[peer], start_ns, stop_ns, window_ns)
    }

    /// Controller-side counterpart of every agent in `peers`.
    pub fn for_collector(local_addr: &str, peers: &[Peer], start_ns: u64, stop_ns: u64, window_ns: u64) -> Node {
        Self::build(Side::Collector, local_addr, peers, start_ns, stop_ns, window_ns)
    }

    /// Adds one-way delay to every flow report. Only valid when this node and
    /// its peers run on synchronized clocks.
    pub fn set_clocks_synchronized(&mut self, on: bool) {
        for t in &mut self.tracked {
            t.metrics.set_clocks_synchronized(on);
        }
    }

    pub fn local_addr(&self) -> &Arc<str> {
        &self.local_addr
    }

    pub fn start_ns(&self) -> u64 {
        self.start_ns
    }

    pub fn stop_ns(&self) -> u64 {
        self.stop_ns
    }

    pub fn stats(&self) -> &NodeStats {
        &self.stats
    }

    /// Absolute time of the next departure inside `[start, stop)`.
    pub fn next_departure_ns(&self) -> Option<u64> {
        let t = self.schedule.peek_time_s()?;
        let ns = self.start_ns + (t * 1e9).round() as u64;
        (ns < self.stop_ns).then_some(ns)
    }

    /// Pops the next departure if it is due at `now_ns`.
    pub fn poll_departure(&mut self, now_ns: u64) -> Option<Outgoing> {
        let due = self.next_departure_ns()?;
        if due > now_ns || now_ns >= self.stop_ns {
            return None;
        }
        let dep = self.schedule.next_departure()?;
        let (dst, tracked_idx, echo_every) = self.outbound[dep.flow_index].clone();
        let echo = echo_every > 0 && dep.seq % u64::from(echo_every) == 0;
        let mut packet = if echo {
            ProbePacket::echo_request(dep.flow_id, dep.seq, now_ns)
        } else {
            ProbePacket::data(dep.flow_id, dep.seq, now_ns)
        };
        if let Some(frame) = dep.frame {
            packet.frame_id = frame.frame_id;
            packet.fragment_index = frame.fragment_index;
            packet.fragment_count = frame.fragment_count;
        }
        let header = packet.encode_header().expect("schedule emits valid fragments");
        self.tracked[tracked_idx].metrics.record_sent(dep.wire_bytes);
        self.note_sent(now_ns, dep.wire_bytes);
        self.stats.max_lateness_ns = self.stats.max_lateness_ns.max(now_ns - due);
        Some(Outgoing {
            dst,
            header,
            wire_bytes: dep.wire_bytes,
        })
    }

    fn note_sent(&mut self, now_ns: u64, wire_bytes: u32) {
        self.stats.sent_packets += 1;
        self.stats.sent_bytes += u64::from(wire_bytes);
        self.stats.first_tx_ns.get_or_insert(now_ns);
        self.stats.last_tx_ns = Some(now_ns);
    }

    /// Accounts a received datagram; returns the echo reply to send, if any.
    pub fn on_datagram(&mut self, src: &str, bytes: &[u8], wire_bytes: u32, rx_ns: u64, now_ns: u64) -> Option<Outgoing> {
        if rx_ns < self.start_ns || rx_ns > self.stop_ns {
            self.stats.outside_window += 1;
            return None;
        }
        let Ok(packet) = ProbePacket::decode(bytes) else {
            self.stats.malformed += 1;
            return None;
        };
        if packet.tx_timestamp_ns < self.start_ns {
            self.stats.stale += 1;
            return None;
        }
        let Some(idx) = self
            .peers
            .get(src)
            .and_then(|&d| self.flow_lookup[d].get(&packet.flow_id))
            .copied()
        else {
            self.stats.stray += 1;
            return None;
        };
        self.stats.received += 1;
        self.tracked[idx].metrics.ingest(&packet, rx_ns, wire_bytes);
        if packet.packet_type != PacketType::EchoRequest || now_ns >= self.stop_ns {
            return None;
        }
        let reply = packet.make_echo_reply(rx_ns, now_ns).expect("checked echo request");
        self.note_sent(now_ns, ECHO_REPLY_BYTES);
        self.stats.echo_replies_sent += 1;
        Some(Outgoing {
            dst: Arc::from(src),
            header: reply.encode_header().expect("decoded fragments are valid"),
            wire_bytes: ECHO_REPLY_BYTES,
        })
    }

    /// Windows closed since the previous call.
    pub fn drain_closed_windows(&mut self, now_ns: u64) -> Vec<WindowEvent> {
        let mut out = Vec::new();
        for t in &mut self.tracked {
            let closed = t.metrics.closed_windows(now_ns.min(self.stop_ns));
            let window_ns = t.metrics.config().window_ns;
            for (i, w) in closed.iter().enumerate().skip(t.reported_windows) {
                out.push(WindowEvent {
                    device_id: t.key.device_id.clone(),
                    flow_id: t.key.flow_id,
                    window_index: i,
                    window_start_ns: self.start_ns + i as u64 * window_ns,
                    counters: *w,
                    throughput_bps: crate::metrics::window_throughput_bps(w.rx_bytes, window_ns),
                });
            }
            t.reported_windows = t.reported_windows.max(closed.len());
        }
        out
    }

    pub fn metrics(&self, key: &FlowKey) -> Option<&FlowMetrics> {
        self.tracked.iter().find(|t| &t.key == key).map(|t| &t.metrics)
    }

    /// Reports for every tracked flow, in profile order.
    pub fn finalize(&self, end_ns: u64) -> Vec<(FlowKey, FlowReport)> {
        self.tracked
            .iter()
            .map(|t| (t.key.clone(), t.metrics.finalize(end_ns)))
            .collect()
    }
}
