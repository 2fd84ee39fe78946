//! Streaming per-flow link-quality accumulators.
//!
//! A [`FlowMetrics`] ingests decoded probe packets as they arrive and, at the
//! end of a run, produces a [`FlowReport`]: per-window throughput, loss,
//! jitter, RTT percentiles and video frame drops.
//!
//! Data and echo-request packets feed the receive-side counters. Echo replies
//! only contribute RTT samples (their sequence numbers are a sparse subset of
//! the flow's and would otherwise read as loss).

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::probe::{PacketType, ProbePacket};
use crate::stats::percentile_sorted;

pub const DEFAULT_WINDOW_NS: u64 = 1_000_000_000;

/// Sequence numbers below this bound are tracked in a bitmap; rarer, larger
/// values spill into a hash set.
const BITMAP_LIMIT: u64 = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub window_ns: u64,
    /// Set for video flows; enables frame accounting.
    pub frame_deadline_ns: Option<u64>,
    /// Sender and receiver clocks share a time base, so `rx - tx` is a
    /// meaningful one-way delay. Without it only round trips are reported.
    #[serde(default)]
    pub clocks_synchronized: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            window_ns: DEFAULT_WINDOW_NS,
            frame_deadline_ns: None,
            clocks_synchronized: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowCounters {
    pub rx_bytes: u64,
    pub rx_packets: u64,
}

#[derive(Debug, Clone, Default)]
struct SeqTracker {
    bits: Vec<u64>,
    overflow: HashSet<u64>,
}

impl SeqTracker {
    /// Returns true when `seq` had not been seen before.
    fn insert(&mut self, seq: u64) -> bool {
        if seq < BITMAP_LIMIT {
            let word = (seq / 64) as usize;
            let mask = 1u64 << (seq % 64);
            if word >= self.bits.len() {
                self.bits.resize(word + 1, 0);
            }
            let fresh = self.bits[word] & mask == 0;
            self.bits[word] |= mask;
            fresh
        } else {
            self.overflow.insert(seq)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct FrameTrack {
    fragment_count: u16,
    received: Vec<bool>,
    received_n: u16,
    first_ns: u64,
    last_ns: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameStats {
    /// Frame ids 0..=highest seen.
    pub total: u64,
    pub dropped: u64,
    /// Incomplete frames whose deadline had not expired when the run ended.
    pub censored: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RttStats {
    pub samples_ns: Vec<u64>,
    pub p50_ns: Option<f64>,
    pub p95_ns: Option<f64>,
    pub max_ns: Option<u64>,
    pub mean_ns: Option<f64>,
}

impl RttStats {
    pub fn from_samples(samples_ns: Vec<u64>) -> RttStats {
        let mut sorted: Vec<f64> = samples_ns.iter().map(|&s| s as f64).collect();
        sorted.sort_by(f64::total_cmp);
        let mean_ns = if samples_ns.is_empty() {
            None
        } else {
            Some(samples_ns.iter().map(|&s| s as f64).sum::<f64>() / samples_ns.len() as f64)
        };
        RttStats {
            p50_ns: percentile_sorted(&sorted, 0.50),
            p95_ns: percentile_sorted(&sorted, 0.95),
            max_ns: samples_ns.iter().copied().max(),
            mean_ns,
            samples_ns,
        }
    }
}

/// Final per-flow outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub flow_id: u16,
    pub start_ns: u64,
    pub end_ns: u64,
    pub window_ns: u64,
    pub windows: Vec<WindowCounters>,
    pub throughput_bps: Vec<f64>,
    pub mean_throughput_bps: Option<f64>,
    pub rx_bytes: u64,
    pub rx_packets: u64,
    pub duplicate_count: u64,
    pub max_seq: Option<u64>,
    /// `None` when nothing was received.
    pub loss_ratio: Option<f64>,
    pub jitter_ns: f64,
    pub rtt: RttStats,
    /// Present only when the clocks were declared synchronized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub one_way_delay: Option<RttStats>,
    pub frames: Option<FrameStats>,
    pub tx_packets: u64,
    pub tx_bytes: u64,
}

impl FlowReport {
    pub fn window_start_ns(&self, index: usize) -> u64 {
        self.start_ns + index as u64 * self.window_ns
    }

    pub fn dropped_frames(&self) -> u64 {
        self.frames.map_or(0, |f| f.dropped)
    }
}

pub(crate) fn window_throughput_bps(rx_bytes: u64, window_ns: u64) -> f64 {
    rx_bytes as f64 * 8.0 / (window_ns as f64 / 1e9)
}

/// Loss from the highest sequence seen; reordering never counts as loss.
pub fn loss_ratio(max_seq: Option<u64>, received: u64) -> Option<f64> {
    max_seq.map(|m| {
        let expected = m as f64 + 1.0;
        (expected - received as f64) / expected
    })
}

#[derive(Debug, Clone)]
pub struct FlowMetrics {
    flow_id: u16,
    start_ns: u64,
    config: MetricsConfig,
    windows: Vec<WindowCounters>,
    rx_bytes: u64,
    rx_packets: u64,
    seen: SeqTracker,
    max_seq: Option<u64>,
    duplicate_count: u64,
    jitter_ns: f64,
    last_transit_ns: Option<i128>,
    rtt_samples_ns: Vec<u64>,
    one_way_samples_ns: Vec<u64>,
    frames: BTreeMap<u32, FrameTrack>,
    tx_packets: u64,
    tx_bytes: u64,
}

impl FlowMetrics {
    pub fn new(flow_id: u16, start_ns: u64, config: MetricsConfig) -> Self {
        assert!(config.window_ns > 0, "window length must be positive");
        FlowMetrics {
            flow_id,
            start_ns,
            config,
            windows: Vec::new(),
            rx_bytes: 0,
            rx_packets: 0,
            seen: SeqTracker::default(),
            max_seq: None,
            duplicate_count: 0,
            jitter_ns: 0.0,
            last_transit_ns: None,
            rtt_samples_ns: Vec::new(),
            one_way_samples_ns: Vec::new(),
            frames: BTreeMap::new(),
            tx_packets: 0,
            tx_bytes: 0,
        }
    }

    pub fn flow_id(&self) -> u16 {
        self.flow_id
    }

    pub fn config(&self) -> &MetricsConfig {
        &self.config
    }

    pub fn set_clocks_synchronized(&mut self, on: bool) {
        self.config.clocks_synchronized = on;
    }

    pub fn record_sent(&mut self, wire_bytes: u32) {
        self.tx_packets += 1;
        self.tx_bytes += u64::from(wire_bytes);
    }

    pub fn window_index(&self, rx_ns: u64) -> usize {
        (rx_ns.saturating_sub(self.start_ns) / self.config.window_ns) as usize
    }

    pub fn ingest(&mut self, packet: &ProbePacket, rx_ns: u64, wire_bytes: u32) {
        if packet.packet_type == PacketType::EchoReply {
            if let Some(rtt) = packet.rtt_ns(rx_ns) {
                self.rtt_samples_ns.push(rtt);
            }
            return;
        }
        if !self.seen.insert(packet.seq) {
            self.duplicate_count += 1;
            return;
        }
        self.max_seq = Some(self.max_seq.map_or(packet.seq, |m| m.max(packet.seq)));
        self.rx_packets += 1;
        self.rx_bytes += u64::from(wire_bytes);
        let w = self.window_index(rx_ns);
        if w >= self.windows.len() {
            self.windows.resize(w + 1, WindowCounters::default());
        }
        self.windows[w].rx_bytes += u64::from(wire_bytes);
        self.windows[w].rx_packets += 1;

        let transit = i128::from(rx_ns) - i128::from(packet.tx_timestamp_ns);
        if let Some(prev) = self.last_transit_ns {
            let d = (transit - prev).abs() as f64;
            self.jitter_ns += (d - self.jitter_ns) / 16.0;
        }
        self.last_transit_ns = Some(transit);
        if self.config.clocks_synchronized {
            self.one_way_samples_ns.push(rx_ns.saturating_sub(packet.tx_timestamp_ns));
        }

        if self.config.frame_deadline_ns.is_some() {
            self.track_fragment(packet, rx_ns);
        }
    }

    fn track_fragment(&mut self, packet: &ProbePacket, rx_ns: u64) {
        let track = self.frames.entry(packet.frame_id).or_insert_with(|| FrameTrack {
            fragment_count: packet.fragment_count,
            received: vec![false; usize::from(packet.fragment_count)],
            received_n: 0,
            first_ns: rx_ns,
            last_ns: rx_ns,
        });
        let i = usize::from(packet.fragment_index);
        if i < track.received.len() && !track.received[i] {
            track.received[i] = true;
            track.received_n += 1;
            track.first_ns = track.first_ns.min(rx_ns);
            track.last_ns = track.last_ns.max(rx_ns);
        }
    }

    /// Frame accounting as of `end_ns`; `None` for non-video flows.
    ///
    /// A frame is dropped when some fragment never arrived, or the last one
    /// arrived more than the deadline after the first. Frame ids below the
    /// highest one seen that never showed up at all are dropped too.
    pub fn frame_drops(&self, end_ns: u64) -> Option<FrameStats> {
        let deadline = self.config.frame_deadline_ns?;
        let Some((&max_id, _)) = self.frames.last_key_value() else {
            return Some(FrameStats::default());
        };
        let total = u64::from(max_id) + 1;
        let mut stats = FrameStats {
            total,
            dropped: total - self.frames.len() as u64,
            censored: 0,
        };
        for track in self.frames.values() {
            let complete = track.received_n == track.fragment_count;
            if complete {
                if track.last_ns - track.first_ns > deadline {
                    stats.dropped += 1;
                }
            } else if track.first_ns.saturating_add(deadline) > end_ns {
                stats.censored += 1;
            } else {
                stats.dropped += 1;
            }
        }
        Some(stats)
    }

    /// Counters of every window that closed at or before `now_ns`, including
    /// windows that saw no traffic.
    pub fn closed_windows(&self, now_ns: u64) -> Vec<WindowCounters> {
        let closed = self.window_index(now_ns);
        let mut out: Vec<WindowCounters> = self.windows.iter().take(closed).copied().collect();
        out.resize(closed, WindowCounters::default());
        out
    }

    pub fn finalize(&self, end_ns: u64) -> FlowReport {
        let window_ns = self.config.window_ns;
        let span = end_ns.saturating_sub(self.start_ns);
        let mut windows = self.windows.clone();
        let expected = span.div_ceil(window_ns) as usize;
        if windows.len() < expected {
            windows.resize(expected, WindowCounters::default());
        }
        let throughput_bps = windows.iter().map(|w| window_throughput_bps(w.rx_bytes, window_ns)).collect();
        let mean_throughput_bps = (span > 0).then(|| self.rx_bytes as f64 * 8.0 / (span as f64 / 1e9));
        FlowReport {
            flow_id: self.flow_id,
            start_ns: self.start_ns,
            end_ns,
            window_ns,
            windows,
            throughput_bps,
            mean_throughput_bps,
            rx_bytes: self.rx_bytes,
            rx_packets: self.rx_packets,
            duplicate_count: self.duplicate_count,
            max_seq: self.max_seq,
            loss_ratio: loss_ratio(self.max_seq, self.rx_packets),
            jitter_ns: self.jitter_ns,
            rtt: RttStats::from_samples(self.rtt_samples_ns.clone()),
            one_way_delay: self
                .config
                .clocks_synchronized
                .then(|| RttStats::from_samples(self.one_way_samples_ns.clone())),
            frames: self.frame_drops(end_ns),
            tx_packets: self.tx_packets,
            tx_bytes: self.tx_bytes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::ProbePacket;

    const MS: u64 = 1_000_000;

    fn data(seq: u64) -> ProbePacket {
        ProbePacket::data(1, seq, 0)
    }

    fn fragment(frame_id: u32, index: u16, count: u16) -> ProbePacket {
        ProbePacket {
            frame_id,
            fragment_index: index,
            fragment_count: count,
            ..ProbePacket::data(1, u64::from(frame_id) * u64::from(count) + u64::from(index), 0)
        }
    }

    fn video_metrics() -> FlowMetrics {
        FlowMetrics::new(
            1,
            0,
            MetricsConfig {
                frame_deadline_ns: Some(100 * MS),
                ..MetricsConfig::default()
            },
        )
    }

    #[test]
    fn hundred_full_packets_in_one_window() {
        let mut m = FlowMetrics::new(1, 0, MetricsConfig::default());
        for seq in 0..100 {
            m.ingest(&data(seq), seq * 5 * MS, 1500);
        }
        let r = m.finalize(1_000 * MS);
        assert_eq!(r.throughput_bps, vec![1.2e6]);
        assert_eq!(r.loss_ratio, Some(0.0));
    }

    #[test]
    fn gap_counts_as_loss() {
        let mut m = FlowMetrics::new(1, 0, MetricsConfig::default());
        for seq in [0, 1, 3, 4] {
            m.ingest(&data(seq), 10, 100);
        }
        assert_eq!(m.finalize(1_000).loss_ratio, Some(0.2));
    }

    #[test]
    fn duplicates_are_counted_apart() {
        let mut m = FlowMetrics::new(1, 0, MetricsConfig::default());
        m.ingest(&data(0), 10, 100);
        m.ingest(&data(0), 20, 100);
        let r = m.finalize(1_000);
        assert_eq!((r.rx_packets, r.duplicate_count, r.rx_bytes), (1, 1, 100));
    }

    #[test]
    fn reordering_is_not_loss() {
        let mut m = FlowMetrics::new(1, 0, MetricsConfig::default());
        for seq in [2, 0, 1] {
            m.ingest(&data(seq), 10, 100);
        }
        assert_eq!(m.finalize(1_000).loss_ratio, Some(0.0));
    }

    #[test]
    fn one_way_delay_only_with_synchronized_clocks() {
        let pkt = |seq| ProbePacket::data(1, seq, 3 * MS);
        let mut plain = FlowMetrics::new(1, 0, MetricsConfig::default());
        plain.ingest(&pkt(0), 5 * MS, 100);
        let r = plain.finalize(1_000 * MS);
        assert_eq!(r.one_way_delay, None);
        assert!(!serde_json::to_string(&r).unwrap().contains("one_way_delay"));

        let mut synced = FlowMetrics::new(1, 0, MetricsConfig::default());
        synced.set_clocks_synchronized(true);
        synced.ingest(&pkt(0), 5 * MS, 100);
        synced.ingest(&pkt(1), 7 * MS, 100);
        synced.ingest(&pkt(1), 9 * MS, 100);
        let owd = synced.finalize(1_000 * MS).one_way_delay.unwrap();
        assert_eq!(owd.samples_ns, vec![2 * MS, 4 * MS]);
        assert_eq!(owd.mean_ns, Some(3e6));
    }

    #[test]
    fn rtt_percentiles() {
        let mut m = FlowMetrics::new(1, 0, MetricsConfig::default());
        for (i, rtt_ms) in [100u64, 100, 200].into_iter().enumerate() {
            let reply = ProbePacket::echo_request(1, i as u64, 0).make_echo_reply(0, 0).unwrap();
            m.ingest(&reply, rtt_ms * MS, 48);
        }
        let r = m.finalize(1_000 * MS);
        assert_eq!(r.rtt.p50_ns, Some(100.0 * MS as f64));
        assert_eq!(r.rtt.max_ns, Some(200 * MS));
        // Echo replies are not receive-side traffic.
        assert_eq!((r.rx_packets, r.loss_ratio), (0, None));
    }

    #[test]
    fn empty_flow_reports_null_loss() {
        let m = FlowMetrics::new(1, 0, MetricsConfig::default());
        let r = m.finalize(0);
        assert!(r.throughput_bps.is_empty());
        assert_eq!(r.loss_ratio, None);
        assert_eq!(r.mean_throughput_bps, None);
    }

    #[test]
    fn jitter_follows_rfc3550_recurrence() {
        let mut m = FlowMetrics::new(1, 0, MetricsConfig::default());
        m.ingest(&ProbePacket::data(1, 0, 0), 1_000, 100);
        m.ingest(&ProbePacket::data(1, 1, 1_000), 2_160, 100);
        // |D| = 160
        assert_eq!(m.finalize(10_000).jitter_ns, 10.0);
    }

    #[test]
    fn frame_within_deadline_is_kept() {
        let mut m = video_metrics();
        for (i, t) in [0u64, 10, 20].into_iter().enumerate() {
            m.ingest(&fragment(0, i as u16, 3), t * MS, 1000);
        }
        assert_eq!(m.frame_drops(10_000 * MS).unwrap(), FrameStats { total: 1, dropped: 0, censored: 0 });
    }

    #[test]
    fn missing_fragment_drops_frame() {
        let mut m = video_metrics();
        m.ingest(&fragment(0, 0, 3), 0, 1000);
        m.ingest(&fragment(0, 2, 3), MS, 1000);
        assert_eq!(m.frame_drops(10_000 * MS).unwrap().dropped, 1);
    }

    #[test]
    fn late_fragment_drops_frame() {
        let mut m = video_metrics();
        m.ingest(&fragment(0, 0, 3), 0, 1000);
        m.ingest(&fragment(0, 1, 3), 50 * MS, 1000);
        m.ingest(&fragment(0, 2, 3), 150 * MS, 1000);
        assert_eq!(m.frame_drops(10_000 * MS).unwrap().dropped, 1);
    }

    #[test]
    fn frames_never_seen_count_as_dropped() {
        let mut m = video_metrics();
        m.ingest(&fragment(0, 0, 1), 0, 1000);
        m.ingest(&fragment(3, 0, 1), MS, 1000);
        assert_eq!(m.frame_drops(10_000 * MS).unwrap(), FrameStats { total: 4, dropped: 2, censored: 0 });
    }

    #[test]
    fn incomplete_frame_at_run_end_is_censored() {
        let mut m = video_metrics();
        m.ingest(&fragment(0, 0, 2), 990 * MS, 1000);
        let s = m.frame_drops(1_000 * MS).unwrap();
        assert_eq!((s.dropped, s.censored), (0, 1));
    }

    #[test]
    fn windows_cover_the_run_and_conserve_bytes() {
        let mut m = FlowMetrics::new(1, 1_000, MetricsConfig::default());
        m.ingest(&data(0), 1_000 + 2_500 * MS, 700);
        m.ingest(&data(1), 1_000 + 100 * MS, 300);
        let r = m.finalize(1_000 + 4_200 * MS);
        assert_eq!(r.windows.len(), 5);
        assert_eq!(r.windows.iter().map(|w| w.rx_bytes).sum::<u64>(), r.rx_bytes);
        assert_eq!(r.window_start_ns(3) - r.window_start_ns(2), DEFAULT_WINDOW_NS);
    }

    #[test]
    fn closed_windows_exclude_the_open_one() {
        let mut m = FlowMetrics::new(1, 0, MetricsConfig::default());
        m.ingest(&data(0), 10, 100);
        m.ingest(&data(1), 1_500 * MS, 100);
        assert_eq!(m.closed_windows(1_600 * MS).len(), 1);
        assert_eq!(m.closed_windows(2_000 * MS).len(), 2);
        assert_eq!(m.closed_windows(5_000 * MS).len(), 5);
    }

    #[test]
    fn large_sequence_numbers_still_dedupe() {
        let mut m = FlowMetrics::new(1, 0, MetricsConfig::default());
        m.ingest(&data(u64::MAX - 1), 10, 100);
        m.ingest(&data(u64::MAX - 1), 11, 100);
        assert_eq!(m.finalize(100).duplicate_count, 1);
    }
}
