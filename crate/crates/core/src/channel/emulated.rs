use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{system_now_ns, Datagram, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Shared service rate of the medium.
    pub capacity_bps: u64,
    /// Tail-drop limit of the shared FIFO, packet in service included.
    pub buffer_bytes: u64,
    #[serde(default)]
    pub propagation_ns: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            capacity_bps: 100_000_000,
            buffer_bytes: 1_250_000,
            propagation_ns: 1_000_000,
        }
    }
}

impl ChannelConfig {
    /// Transmission time of `bytes`, rounded up so delivered rate never
    /// exceeds capacity.
    pub fn service_ns(&self, bytes: u32) -> u64 {
        let bits = u128::from(bytes) * 8 * 1_000_000_000;
        bits.div_ceil(u128::from(self.capacity_bps.max(1))) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnqueueResult {
    Queued { completion_ns: u64, delivery_ns: u64 },
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub src: Arc<str>,
    pub dst: Arc<str>,
    pub bytes: Vec<u8>,
    pub wire_bytes: u32,
    pub enqueue_ns: u64,
    pub delivery_ns: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub enqueued: u64,
    pub dropped: u64,
    pub delivered: u64,
    pub delivered_bytes: u64,
    pub max_queued_bytes: u64,
}

/// Single-server FIFO shared by every attached endpoint.
///
/// A packet's service completes at `max(now, previous completion) +
/// bytes * 8 / capacity` and it is delivered `propagation_ns` later. Packets
/// that would push the queued bytes over `buffer_bytes` are tail-dropped.
#[derive(Debug, Clone)]
pub struct EmulatedChannel {
    config: ChannelConfig,
    endpoints: BTreeMap<String, Arc<str>>,
    /// (completion time, size) of every packet not yet fully serviced.
    backlog: VecDeque<(u64, u32)>,
    queued_bytes: u64,
    last_completion_ns: u64,
    last_now_ns: u64,
    in_flight: VecDeque<Delivery>,
    stats: ChannelStats,
}

impl EmulatedChannel {
    pub fn new(config: ChannelConfig) -> Self {
        EmulatedChannel {
            config,
            endpoints: BTreeMap::new(),
            backlog: VecDeque::new(),
            queued_bytes: 0,
            last_completion_ns: 0,
            last_now_ns: 0,
            in_flight: VecDeque::new(),
            stats: ChannelStats::default(),
        }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    pub fn attach(&mut self, name: &str) -> Arc<str> {
        self.endpoints.entry(name.to_string()).or_insert_with(|| Arc::from(name)).clone()
    }

    pub fn is_attached(&self, name: &str) -> bool {
        self.endpoints.contains_key(name)
    }

    fn endpoint(&self, name: &str) -> Result<Arc<str>, ChannelError> {
        self.endpoints
            .get(name)
            .cloned()
            .ok_or_else(|| ChannelError::UnknownEndpoint(name.to_string()))
    }

    fn release(&mut self, now_ns: u64) {
        while let Some(&(completion, bytes)) = self.backlog.front() {
            if completion > now_ns {
                break;
            }
            self.backlog.pop_front();
            self.queued_bytes -= u64::from(bytes);
        }
    }

    /// Bytes queued or in service at `now_ns`.
    pub fn occupancy(&mut self, now_ns: u64) -> u64 {
        self.release(now_ns.max(self.last_now_ns));
        self.queued_bytes
    }

    pub fn transmit(
        &mut self,
        src: &str,
        dst: &str,
        bytes: Vec<u8>,
        wire_bytes: u32,
        now_ns: u64,
    ) -> Result<EnqueueResult, ChannelError> {
        let src = self.endpoint(src)?;
        let dst = self.endpoint(dst)?;
        let now_ns = now_ns.max(self.last_now_ns);
        self.last_now_ns = now_ns;
        self.release(now_ns);
        if self.queued_bytes + u64::from(wire_bytes) > self.config.buffer_bytes {
            self.stats.dropped += 1;
            return Ok(EnqueueResult::Dropped);
        }
        let start = now_ns.max(self.last_completion_ns);
        let completion_ns = start + self.config.service_ns(wire_bytes);
        let delivery_ns = completion_ns + self.config.propagation_ns;
        self.last_completion_ns = completion_ns;
        self.backlog.push_back((completion_ns, wire_bytes));
        self.queued_bytes += u64::from(wire_bytes);
        self.stats.enqueued += 1;
        self.stats.max_queued_bytes = self.stats.max_queued_bytes.max(self.queued_bytes);
        self.in_flight.push_back(Delivery {
            src,
            dst,
            bytes,
            wire_bytes,
            enqueue_ns: now_ns,
            delivery_ns,
        });
        Ok(EnqueueResult::Queued {
            completion_ns,
            delivery_ns,
        })
    }

    pub fn next_delivery_ns(&self) -> Option<u64> {
        self.in_flight.front().map(|d| d.delivery_ns)
    }

    /// Every packet delivered at or before `until_ns`, in delivery order.
    pub fn advance(&mut self, until_ns: u64) -> Vec<Delivery> {
        let mut out = Vec::new();
        self.advance_into(until_ns, &mut out);
        out
    }

    pub fn advance_into(&mut self, until_ns: u64, out: &mut Vec<Delivery>) {
        while self.in_flight.front().is_some_and(|d| d.delivery_ns <= until_ns) {
            let d = self.in_flight.pop_front().expect("front checked");
            self.stats.delivered += 1;
            self.stats.delivered_bytes += u64::from(d.wire_bytes);
            out.push(d);
        }
        if until_ns >= self.last_now_ns {
            self.last_now_ns = until_ns;
            self.release(until_ns);
        }
    }

    pub fn pending(&self) -> usize {
        self.in_flight.len()
    }
}

/// A data-plane send observed on the emulated network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub src: Arc<str>,
    pub time_ns: u64,
    pub packet_type: u8,
    pub flow_id: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkClock {
    /// Advanced explicitly by the driver.
    Virtual(u64),
    /// Follows the system clock; used for loopback runs in real time.
    System,
}

/// An [`EmulatedChannel`] plus per-endpoint inboxes and a clock.
#[derive(Debug)]
pub struct EmulatedNetwork {
    channel: EmulatedChannel,
    clock: NetworkClock,
    inboxes: HashMap<Arc<str>, VecDeque<Datagram>>,
    trace: Option<Vec<TraceEntry>>,
}

impl EmulatedNetwork {
    pub fn new(config: ChannelConfig, clock: NetworkClock) -> Self {
        EmulatedNetwork {
            channel: EmulatedChannel::new(config),
            clock,
            inboxes: HashMap::new(),
            trace: None,
        }
    }

    pub fn shared(config: ChannelConfig, clock: NetworkClock) -> Arc<Mutex<Self>> {
        Arc::new(Mutex::new(Self::new(config, clock)))
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn channel(&self) -> &EmulatedChannel {
        &self.channel
    }

    pub fn channel_mut(&mut self) -> &mut EmulatedChannel {
        &mut self.channel
    }

    pub fn now_ns(&self) -> u64 {
        match self.clock {
            NetworkClock::Virtual(t) => t,
            NetworkClock::System => system_now_ns(),
        }
    }

    /// Moves a virtual clock forward; never backwards. No-op on system time.
    pub fn set_now(&mut self, t_ns: u64) {
        if let NetworkClock::Virtual(now) = &mut self.clock {
            *now = (*now).max(t_ns);
        }
    }

    pub fn attach(&mut self, name: &str) -> Arc<str> {
        let id = self.channel.attach(name);
        self.inboxes.entry(id.clone()).or_default();
        id
    }

    pub fn transmit(&mut self, src: &str, dst: &str, bytes: Vec<u8>, wire_bytes: u32) -> Result<EnqueueResult, ChannelError> {
        let now = self.now_ns();
        if let Some(trace) = &mut self.trace {
            if let Some(src_id) = self.channel.endpoints.get(src) {
                trace.push(TraceEntry {
                    src: src_id.clone(),
                    time_ns: now,
                    packet_type: bytes.get(5).copied().unwrap_or(u8::MAX),
                    flow_id: bytes.get(6..8).map_or(0, |b| u16::from_be_bytes([b[0], b[1]])),
                });
            }
        }
        self.channel.transmit(src, dst, bytes, wire_bytes, now)
    }

    /// Moves every delivery due by the current time into its inbox.
    pub fn deliver_due(&mut self) {
        let now = self.now_ns();
        for d in self.channel.advance(now) {
            if let Some(inbox) = self.inboxes.get_mut(&d.dst) {
                inbox.push_back(Datagram {
                    src: d.src.to_string(),
                    bytes: d.bytes,
                    wire_bytes: d.wire_bytes,
                    rx_ns: d.delivery_ns,
                });
            }
        }
    }

    fn pop(&mut self, name: &str) -> Option<Datagram> {
        self.inboxes.get_mut(name).and_then(VecDeque::pop_front)
    }
}

/// [`Transport`] handle on a shared [`EmulatedNetwork`].
#[derive(Debug, Clone)]
pub struct EmulatedEndpoint {
    name: Arc<str>,
    net: Arc<Mutex<EmulatedNetwork>>,
}

impl EmulatedEndpoint {
    pub fn attach(net: &Arc<Mutex<EmulatedNetwork>>, name: &str) -> Self {
        let id = net.lock().expect("network lock").attach(name);
        EmulatedEndpoint {
            name: id,
            net: net.clone(),
        }
    }

    pub fn network(&self) -> &Arc<Mutex<EmulatedNetwork>> {
        &self.net
    }
}

impl Transport for EmulatedEndpoint {
    fn local_addr(&self) -> String {
        self.name.to_string()
    }

    fn send_to(&mut self, dst: &str, datagram: &[u8]) -> Result<(), TransportError> {
        let len = datagram.len() as u32;
        self.net
            .lock()
            .expect("network lock")
            .transmit(&self.name, dst, datagram.to_vec(), len)
            .map(|_| ())
            .map_err(|ChannelError::UnknownEndpoint(e)| TransportError::UnknownEndpoint(e))
    }

    fn send_probe(&mut self, dst: &str, header: &[u8; crate::probe::HEADER_LEN], wire_bytes: u32) -> Result<(), TransportError> {
        // Padding is all zeros; carry only the header and the declared size.
        self.net
            .lock()
            .expect("network lock")
            .transmit(&self.name, dst, header.to_vec(), wire_bytes)
            .map(|_| ())
            .map_err(|ChannelError::UnknownEndpoint(e)| TransportError::UnknownEndpoint(e))
    }

    fn try_recv(&mut self) -> Result<Option<Datagram>, TransportError> {
        let mut net = self.net.lock().expect("network lock");
        net.deliver_due();
        Ok(net.pop(&self.name))
    }

    fn now_ns(&self) -> u64 {
        self.net.lock().expect("network lock").now_ns()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel(capacity_bps: u64, buffer_bytes: u64) -> EmulatedChannel {
        let mut ch = EmulatedChannel::new(ChannelConfig {
            capacity_bps,
            buffer_bytes,
            propagation_ns: 0,
        });
        ch.attach("a");
        ch.attach("b");
        ch
    }

    #[test]
    fn single_packet_service_time() {
        let mut ch = channel(100_000_000, 1_000_000);
        let r = ch.transmit("a", "b", vec![0; 48], 1250, 5_000).unwrap();
        assert_eq!(
            r,
            EnqueueResult::Queued {
                completion_ns: 105_000,
                delivery_ns: 105_000
            }
        );
        let out = ch.advance(105_000);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].delivery_ns, 105_000);
    }

    #[test]
    fn unknown_endpoint_is_rejected() {
        let mut ch = channel(1_000_000, 10_000);
        assert_eq!(
            ch.transmit("a", "zz", vec![], 100, 0),
            Err(ChannelError::UnknownEndpoint("zz".into()))
        );
    }

    #[test]
    fn full_queue_tail_drops() {
        let mut ch = channel(1_000_000, 3_000);
        for _ in 0..3 {
            assert!(matches!(ch.transmit("a", "b", vec![], 1000, 0).unwrap(), EnqueueResult::Queued { .. }));
        }
        assert_eq!(ch.transmit("a", "b", vec![], 1000, 0).unwrap(), EnqueueResult::Dropped);
        assert_eq!(ch.stats().dropped, 1);
        // One packet served (8 ms at 1 Mbit/s) frees room for another.
        assert!(matches!(ch.transmit("a", "b", vec![], 1000, 8_000_000).unwrap(), EnqueueResult::Queued { .. }));
    }

    #[test]
    fn equal_time_packets_keep_call_order() {
        let mut ch = channel(1_000_000_000, 1_000_000);
        for i in 0..5u8 {
            ch.transmit("a", "b", vec![i], 100, 0).unwrap();
        }
        let order: Vec<u8> = ch.advance(u64::MAX).iter().map(|d| d.bytes[0]).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn nothing_pending_means_nothing_delivered() {
        let mut ch = channel(1_000_000, 1_000);
        assert!(ch.advance(1_000_000_000).is_empty());
        assert_eq!(ch.next_delivery_ns(), None);
    }

    #[test]
    fn endpoint_transport_round_trip() {
        let net = EmulatedNetwork::shared(ChannelConfig::default(), NetworkClock::Virtual(0));
        let mut a = EmulatedEndpoint::attach(&net, "a");
        let mut b = EmulatedEndpoint::attach(&net, "b");
        a.send_to("b", &[1, 2, 3]).unwrap();
        assert!(b.try_recv().unwrap().is_none());
        net.lock().unwrap().set_now(10_000_000);
        let d = b.try_recv().unwrap().unwrap();
        assert_eq!((d.src.as_str(), d.bytes.as_slice(), d.wire_bytes), ("a", &[1u8, 2, 3][..], 3));
        assert_eq!(d.rx_ns, 1_000_000 + ChannelConfig::default().service_ns(3));
    }
}
