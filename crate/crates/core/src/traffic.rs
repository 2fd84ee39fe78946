//! Flow specifications and seedable packet-departure schedules.
//!
//! A device emulates one or more applications. Each application is a
//! [`FlowSpec`]; a [`DeviceTrafficProfile`] bundles the flows of one device and
//! a [`Schedule`] merges their per-packet departures into one time-ordered
//! stream.
//!
//! Rates count UDP payload bits only (the 48-byte probe header is part of the
//! payload; IP/UDP headers are not).
//!
//! Every flow owns a `ChaCha8Rng` seeded from `FlowSpec::seed`, so identical
//! profiles always yield identical departure sequences.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe::HEADER_LEN;

/// Smallest datagram: the probe header alone.
pub const MIN_PAYLOAD_BYTES: u32 = HEADER_LEN as u32;
/// Largest UDP payload over IPv4.
pub const MAX_PAYLOAD_BYTES: u32 = 65_507;
/// Frame-drop deadline applied when a video flow does not set one.
pub const DEFAULT_FRAME_DEADLINE_MS: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    ConstantStream,
    PeriodicSensor,
    BurstyTransfer,
    FrameVideo,
}

/// Uplink is agent to controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uplink,
    Downlink,
}

/// Inter-arrival time model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum IatModel {
    Deterministic { period_s: f64 },
    Exponential { mean_s: f64 },
    /// Back-to-back packets at `burst_rate_bps` for `on_s`, then silence for `off_s`.
    OnOff { on_s: f64, off_s: f64, burst_rate_bps: f64 },
    /// Exponential inter-arrival times whose mean follows from the flow's
    /// target rate. Only meaningful for `ConstantStream`.
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub flow_id: u16,
    pub kind: FlowKind,
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_rate_bps: Option<f64>,
    pub payload_bytes: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iat_model: Option<IatModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_rate_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_bytes: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_deadline_ms: Option<f64>,
    /// Every n-th packet (by sequence number) is sent as an echo request so the
    /// sender can measure round-trip time. 0 disables probing.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub echo_every: u32,
    pub seed: u64,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("flow {flow_id}: payload_bytes {bytes} outside [{MIN_PAYLOAD_BYTES}, {MAX_PAYLOAD_BYTES}]")]
    PayloadSize { flow_id: u16, bytes: u32 },
    #[error("flow {flow_id}: {field} must be positive and finite")]
    NonPositive { flow_id: u16, field: &'static str },
    #[error("flow {flow_id}: missing {field} for {kind:?}")]
    Missing {
        flow_id: u16,
        kind: FlowKind,
        field: &'static str,
    },
    #[error("flow {flow_id}: iat model {model} is not valid for {kind:?}")]
    IncompatibleModel {
        flow_id: u16,
        kind: FlowKind,
        model: &'static str,
    },
    #[error("flow {flow_id}: frame needs {fragments} fragments, more than a u16 can index")]
    TooManyFragments { flow_id: u16, fragments: u64 },
    #[error("flow {flow_id}: target_rate_bps {given} does not match frame_rate_hz * frame_bytes * 8 = {derived}")]
    InconsistentFrameRate {
        flow_id: u16,
        given: f64,
        derived: f64,
    },
    #[error("duplicate flow id {0} in profile")]
    DuplicateFlowId(u16),
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl IatModel {
    fn name(&self) -> &'static str {
        match self {
            IatModel::Deterministic { .. } => "deterministic",
            IatModel::Exponential { .. } => "exponential",
            IatModel::OnOff { .. } => "on_off",
            IatModel::Poisson => "poisson",
        }
    }
}

impl FlowSpec {
    /// Constant-rate stream with a deterministic inter-arrival time.
    pub fn constant_stream(flow_id: u16, rate_bps: f64, payload_bytes: u32, seed: u64) -> Self {
        FlowSpec {
            flow_id,
            kind: FlowKind::ConstantStream,
            direction: Direction::Uplink,
            target_rate_bps: Some(rate_bps),
            payload_bytes,
            iat_model: None,
            frame_rate_hz: None,
            frame_bytes: None,
            frame_deadline_ms: None,
            echo_every: 0,
            seed,
        }
    }

    pub fn periodic_sensor(flow_id: u16, model: IatModel, payload_bytes: u32, seed: u64) -> Self {
        FlowSpec {
            kind: FlowKind::PeriodicSensor,
            target_rate_bps: None,
            iat_model: Some(model),
            ..Self::constant_stream(flow_id, 1.0, payload_bytes, seed)
        }
    }

    pub fn bursty(flow_id: u16, on_s: f64, off_s: f64, burst_rate_bps: f64, payload_bytes: u32, seed: u64) -> Self {
        FlowSpec {
            kind: FlowKind::BurstyTransfer,
            target_rate_bps: None,
            iat_model: Some(IatModel::OnOff {
                on_s,
                off_s,
                burst_rate_bps,
            }),
            ..Self::constant_stream(flow_id, 1.0, payload_bytes, seed)
        }
    }

    pub fn frame_video(flow_id: u16, frame_rate_hz: f64, frame_bytes: u32, payload_bytes: u32, seed: u64) -> Self {
        FlowSpec {
            kind: FlowKind::FrameVideo,
            target_rate_bps: None,
            frame_rate_hz: Some(frame_rate_hz),
            frame_bytes: Some(frame_bytes),
            frame_deadline_ms: Some(DEFAULT_FRAME_DEADLINE_MS),
            ..Self::constant_stream(flow_id, 1.0, payload_bytes, seed)
        }
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn with_echo_every(mut self, n: u32) -> Self {
        self.echo_every = n;
        self
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let flow_id = self.flow_id;
        if !(MIN_PAYLOAD_BYTES..=MAX_PAYLOAD_BYTES).contains(&self.payload_bytes) {
            return Err(ProfileError::PayloadSize {
                flow_id,
                bytes: self.payload_bytes,
            });
        }
        let missing = |field| ProfileError::Missing {
            flow_id,
            kind: self.kind,
            field,
        };
        let incompatible = |m: &IatModel| ProfileError::IncompatibleModel {
            flow_id,
            kind: self.kind,
            model: m.name(),
        };
        let require_positive = |v: f64, field| {
            if positive(v) {
                Ok(())
            } else {
                Err(ProfileError::NonPositive { flow_id, field })
            }
        };
        match self.kind {
            FlowKind::ConstantStream => {
                require_positive(self.target_rate_bps.ok_or_else(|| missing("target_rate_bps"))?, "target_rate_bps")?;
                match &self.iat_model {
                    None | Some(IatModel::Poisson) => {}
                    Some(m) => return Err(incompatible(m)),
                }
            }
            FlowKind::PeriodicSensor => match self.iat_model.as_ref().ok_or_else(|| missing("iat_model"))? {
                IatModel::Deterministic { period_s } => require_positive(*period_s, "period_s")?,
                IatModel::Exponential { mean_s } => require_positive(*mean_s, "mean_s")?,
                m => return Err(incompatible(m)),
            },
            FlowKind::BurstyTransfer => match self.iat_model.as_ref().ok_or_else(|| missing("iat_model"))? {
                IatModel::OnOff {
                    on_s,
                    off_s,
                    burst_rate_bps,
                } => {
                    require_positive(*on_s, "on_s")?;
                    require_positive(*off_s, "off_s")?;
                    require_positive(*burst_rate_bps, "burst_rate_bps")?;
                }
                m => return Err(incompatible(m)),
            },
            FlowKind::FrameVideo => {
                if let Some(m) = &self.iat_model {
                    return Err(incompatible(m));
                }
                let fps = self.frame_rate_hz.ok_or_else(|| missing("frame_rate_hz"))?;
                require_positive(fps, "frame_rate_hz")?;
                let frame_bytes = self.frame_bytes.ok_or_else(|| missing("frame_bytes"))?;
                if frame_bytes == 0 {
                    return Err(ProfileError::NonPositive {
                        flow_id,
                        field: "frame_bytes",
                    });
                }
                require_positive(self.frame_deadline_ms(), "frame_deadline_ms")?;
                let fragments = u64::from(frame_bytes).div_ceil(u64::from(self.payload_bytes));
                if fragments > u64::from(u16::MAX) {
                    return Err(ProfileError::TooManyFragments { flow_id, fragments });
                }
                if let Some(given) = self.target_rate_bps {
                    let derived = fps * f64::from(frame_bytes) * 8.0;
                    if (given - derived).abs() > 1e-9 * derived.max(1.0) {
                        return Err(ProfileError::InconsistentFrameRate { flow_id, given, derived });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn frame_deadline_ms(&self) -> f64 {
        self.frame_deadline_ms.unwrap_or(DEFAULT_FRAME_DEADLINE_MS)
    }

    /// Fragments per video frame; 1 for every other kind.
    pub fn fragment_count(&self) -> u16 {
        match (self.kind, self.frame_bytes) {
            (FlowKind::FrameVideo, Some(fb)) => {
                u64::from(fb).div_ceil(u64::from(self.payload_bytes)).clamp(1, u64::from(u16::MAX)) as u16
            }
            _ => 1,
        }
    }

    /// Long-run mean payload bit rate of this flow.
    pub fn offered_load_bps(&self) -> f64 {
        let bits = f64::from(self.payload_bytes) * 8.0;
        match self.kind {
            FlowKind::ConstantStream => self.target_rate_bps.unwrap_or(0.0),
            FlowKind::FrameVideo => {
                self.frame_rate_hz.unwrap_or(0.0) * f64::from(self.frame_bytes.unwrap_or(0)) * 8.0
            }
            FlowKind::PeriodicSensor | FlowKind::BurstyTransfer => match self.iat_model {
                Some(IatModel::Deterministic { period_s }) => bits / period_s,
                Some(IatModel::Exponential { mean_s }) => bits / mean_s,
                Some(IatModel::OnOff {
                    on_s,
                    off_s,
                    burst_rate_bps,
                }) => burst_rate_bps * on_s / (on_s + off_s),
                Some(IatModel::Poisson) | None => 0.0,
            },
        }
    }
}

/// All flows emulated by one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTrafficProfile {
    pub device_id: String,
    pub flows: Vec<FlowSpec>,
}

impl DeviceTrafficProfile {
    pub fn new(device_id: impl Into<String>, flows: Vec<FlowSpec>) -> Self {
        DeviceTrafficProfile {
            device_id: device_id.into(),
            flows,
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let mut ids = BTreeSet::new();
        for flow in &self.flows {
            if !ids.insert(flow.flow_id) {
                return Err(ProfileError::DuplicateFlowId(flow.flow_id));
            }
            flow.validate()?;
        }
        Ok(())
    }

    pub fn flow(&self, flow_id: u16) -> Option<&FlowSpec> {
        self.flows.iter().find(|f| f.flow_id == flow_id)
    }

    /// Replace every flow seed with one derived from `seed` and the flow id.
    pub fn override_seeds(&mut self, seed: u64) {
        for flow in &mut self.flows {
            flow.seed = mix_seed(seed, u64::from(flow.flow_id));
        }
    }
}

/// Sum of per-flow offered loads in bits per second.
pub fn offered_load(profile: &DeviceTrafficProfile) -> f64 {
    profile.flows.iter().map(FlowSpec::offered_load_bps).sum()
}

/// SplitMix64 finalizer; spreads a base seed over independent streams.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSlot {
    pub frame_id: u32,
    pub fragment_index: u16,
    pub fragment_count: u16,
}

/// One scheduled packet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Departure {
    /// Seconds since the schedule origin.
    pub time_s: f64,
    /// Position of the flow in the profile the schedule was built from.
    pub flow_index: usize,
    pub flow_id: u16,
    pub seq: u64,
    pub wire_bytes: u32,
    pub frame: Option<FrameSlot>,
}

impl Departure {
    /// Absolute departure time given the schedule origin in nanoseconds.
    pub fn time_ns(&self, origin_ns: u64) -> u64 {
        origin_ns + (self.time_s * 1e9).round() as u64
    }
}

#[derive(Debug, Clone)]
enum Pattern {
    Periodic {
        period_s: f64,
    },
    Exponential {
        dist: Exp<f64>,
    },
    OnOff {
        cycle_s: f64,
        burst_iat_s: f64,
        per_cycle: u64,
    },
    Frames {
        frame_period_s: f64,
        fragment_count: u16,
        last_fragment_bytes: u32,
    },
}

#[derive(Debug, Clone)]
struct FlowCursor {
    flow_id: u16,
    payload_bytes: u32,
    pattern: Pattern,
    rng: ChaCha8Rng,
    next_s: f64,
    /// Packets (or frames, for video) scheduled so far; drives closed-form times.
    count: u64,
    seq: u64,
    fragment: u16,
}

impl FlowCursor {
    fn new(spec: &FlowSpec) -> Self {
        let bits = f64::from(spec.payload_bytes) * 8.0;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let exponential = |mean_s: f64| Pattern::Exponential {
            dist: Exp::new(1.0 / mean_s).expect("validated positive mean"),
        };
        let pattern = match (spec.kind, spec.iat_model) {
            (FlowKind::ConstantStream, Some(IatModel::Poisson)) => {
                exponential(bits / spec.target_rate_bps.unwrap_or(1.0))
            }
            (FlowKind::ConstantStream, _) => Pattern::Periodic {
                period_s: bits / spec.target_rate_bps.unwrap_or(1.0),
            },
            (FlowKind::FrameVideo, _) => {
                let count = spec.fragment_count();
                let frame_bytes = spec.frame_bytes.unwrap_or(spec.payload_bytes);
                let rest = frame_bytes - (u32::from(count) - 1) * spec.payload_bytes;
                Pattern::Frames {
                    frame_period_s: 1.0 / spec.frame_rate_hz.unwrap_or(1.0),
                    fragment_count: count,
                    last_fragment_bytes: rest.max(MIN_PAYLOAD_BYTES),
                }
            }
            (_, Some(IatModel::Deterministic { period_s })) => Pattern::Periodic { period_s },
            (_, Some(IatModel::Exponential { mean_s })) => exponential(mean_s),
            (
                _,
                Some(IatModel::OnOff {
                    on_s,
                    off_s,
                    burst_rate_bps,
                }),
            ) => {
                let burst_iat_s = bits / burst_rate_bps;
                let per_cycle = ((on_s / burst_iat_s) - 1e-9).ceil().max(1.0) as u64;
                Pattern::OnOff {
                    cycle_s: on_s + off_s,
                    burst_iat_s,
                    per_cycle,
                }
            }
            (_, Some(IatModel::Poisson)) | (_, None) => Pattern::Periodic { period_s: f64::INFINITY },
        };
        let next_s = match &pattern {
            Pattern::Exponential { dist } => dist.sample(&mut rng),
            _ => 0.0,
        };
        FlowCursor {
            flow_id: spec.flow_id,
            payload_bytes: spec.payload_bytes,
            pattern,
            rng,
            next_s,
            count: 0,
            seq: 0,
            fragment: 0,
        }
    }

    fn emit(&mut self, flow_index: usize) -> Departure {
        let mut departure = Departure {
            time_s: self.next_s,
            flow_index,
            flow_id: self.flow_id,
            seq: self.seq,
            wire_bytes: self.payload_bytes,
            frame: None,
        };
        self.seq += 1;
        match &self.pattern {
            Pattern::Periodic { period_s } => {
                self.count += 1;
                self.next_s = self.count as f64 * period_s;
            }
            Pattern::Exponential { dist } => {
                self.next_s += dist.sample(&mut self.rng);
            }
            Pattern::OnOff {
                cycle_s,
                burst_iat_s,
                per_cycle,
            } => {
                self.count += 1;
                let cycle = self.count / per_cycle;
                let within = self.count % per_cycle;
                self.next_s = cycle as f64 * cycle_s + within as f64 * burst_iat_s;
            }
            Pattern::Frames {
                frame_period_s,
                fragment_count,
                last_fragment_bytes,
            } => {
                let index = self.fragment;
                departure.frame = Some(FrameSlot {
                    frame_id: self.count as u32,
                    fragment_index: index,
                    fragment_count: *fragment_count,
                });
                if index + 1 == *fragment_count {
                    departure.wire_bytes = *last_fragment_bytes;
                    self.fragment = 0;
                    self.count += 1;
                    self.next_s = self.count as f64 * frame_period_s;
                } else {
                    self.fragment += 1;
                }
            }
        }
        departure
    }
}

/// Merged, time-ordered departure stream of a set of flows.
///
/// Ties are broken by ascending flow id, then by position in the profile.
/// The stream is infinite; callers stop pulling at their horizon.
#[derive(Debug, Clone)]
pub struct Schedule {
    cursors: Vec<FlowCursor>,
}

impl Schedule {
    pub fn new(flows: &[FlowSpec]) -> Self {
        Schedule {
            cursors: flows.iter().map(FlowCursor::new).collect(),
        }
    }

    pub fn from_profile(profile: &DeviceTrafficProfile) -> Self {
        Self::new(&profile.flows)
    }

    fn earliest(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, c) in self.cursors.iter().enumerate() {
            if !c.next_s.is_finite() {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let cb = &self.cursors[b];
                    if (c.next_s, c.flow_id) < (cb.next_s, cb.flow_id) {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        best
    }

    /// Time of the next departure without consuming it.
    pub fn peek_time_s(&self) -> Option<f64> {
        self.earliest().map(|i| self.cursors[i].next_s)
    }

    pub fn next_departure(&mut self) -> Option<Departure> {
        let i = self.earliest()?;
        Some(self.cursors[i].emit(i))
    }

    pub fn is_empty(&self) -> bool {
        self.earliest().is_none()
    }
}

impl Iterator for Schedule {
    type Item = Departure;

    fn next(&mut self) -> Option<Departure> {
        self.next_departure()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stream_iat_is_payload_bits_over_rate() {
        let mut s = Schedule::new(&[FlowSpec::constant_stream(1, 3e8, 1500, 1)]);
        let a = s.next_departure().unwrap();
        let b = s.next_departure().unwrap();
        assert_eq!(a.time_s, 0.0);
        assert!((b.time_s - 40e-6).abs() < 1e-15);
        assert_eq!(b.time_ns(0), 40_000);
        assert_eq!((a.seq, b.seq), (0, 1));
    }

    #[test]
    fn periodic_sensor_departs_every_period() {
        let spec = FlowSpec::periodic_sensor(2, IatModel::Deterministic { period_s: 1.0 }, 64, 0);
        let times: Vec<f64> = Schedule::new(&[spec]).take(3).map(|d| d.time_s).collect();
        assert_eq!(times, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn ties_go_to_lower_flow_id() {
        let slow = |id| FlowSpec::periodic_sensor(id, IatModel::Deterministic { period_s: 2.0 }, 64, 0);
        // Listed in descending id order on purpose.
        let mut s = Schedule::new(&[slow(7), slow(3)]);
        let order: Vec<(u16, f64)> = (0..4)
            .map(|_| s.next_departure().unwrap())
            .map(|d| (d.flow_id, d.time_s))
            .collect();
        assert_eq!(order, vec![(3, 0.0), (7, 0.0), (3, 2.0), (7, 2.0)]);
    }

    #[test]
    fn exponential_mean_matches_configuration() {
        let spec = FlowSpec::periodic_sensor(1, IatModel::Exponential { mean_s: 0.010 }, 64, 42);
        let mut s = Schedule::new(&[spec]);
        let mut prev = 0.0;
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let d = s.next_departure().unwrap();
            sum += d.time_s - prev;
            prev = d.time_s;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.010).abs() / 0.010 < 0.02, "mean {mean}");
    }

    #[test]
    fn offered_load_examples() {
        let stream = DeviceTrafficProfile::new("a", vec![FlowSpec::constant_stream(1, 3e8, 1500, 0)]);
        assert_eq!(offered_load(&stream), 3.0e8);
        assert_eq!(offered_load(&DeviceTrafficProfile::new("b", vec![])), 0.0);
        let bursty = DeviceTrafficProfile::new("c", vec![FlowSpec::bursty(1, 1.0, 1.0, 1e8, 1500, 0)]);
        assert_eq!(offered_load(&bursty), 5.0e7);
    }

    #[test]
    fn on_off_long_run_rate_matches_duty_cycle() {
        let spec = FlowSpec::bursty(1, 1.0, 1.0, 1e8, 1500, 0);
        let horizon = 200.0;
        let bytes: u64 = Schedule::new(std::slice::from_ref(&spec))
            .take_while(|d| d.time_s < horizon)
            .map(|d| u64::from(d.wire_bytes))
            .sum();
        let rate = bytes as f64 * 8.0 / horizon;
        assert!((rate - spec.offered_load_bps()).abs() / spec.offered_load_bps() < 0.01, "{rate}");
    }

    #[test]
    fn on_off_is_silent_during_off_phase() {
        let spec = FlowSpec::bursty(1, 0.5, 1.5, 1e6, 1250, 0);
        for d in Schedule::new(&[spec]).take(2000) {
            let phase = d.time_s % 2.0;
            assert!(phase < 0.5 + 1e-9, "departure at {} in off phase", d.time_s);
        }
    }

    #[test]
    fn frame_video_emits_all_fragments_per_frame() {
        let spec = FlowSpec::frame_video(4, 30.0, 3000, 1000, 0);
        let deps: Vec<Departure> = Schedule::new(&[spec]).take(9).collect();
        for (frame, chunk) in deps.chunks(3).enumerate() {
            for (i, d) in chunk.iter().enumerate() {
                let slot = d.frame.unwrap();
                assert_eq!(slot.frame_id, frame as u32);
                assert_eq!(slot.fragment_index, i as u16);
                assert_eq!(slot.fragment_count, 3);
                assert!((d.time_s - frame as f64 / 30.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frame_video_last_fragment_carries_remainder() {
        let spec = FlowSpec::frame_video(4, 10.0, 2500, 1000, 0);
        assert_eq!(spec.fragment_count(), 3);
        let sizes: Vec<u32> = Schedule::new(&[spec]).take(3).map(|d| d.wire_bytes).collect();
        assert_eq!(sizes, vec![1000, 1000, 500]);
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut spec = FlowSpec::constant_stream(1, 1e6, 40, 0);
        assert!(matches!(spec.validate(), Err(ProfileError::PayloadSize { bytes: 40, .. })));
        spec.payload_bytes = 48;
        spec.target_rate_bps = Some(0.0);
        assert!(matches!(spec.validate(), Err(ProfileError::NonPositive { .. })));
        let sensor = FlowSpec {
            iat_model: None,
            ..FlowSpec::periodic_sensor(2, IatModel::Poisson, 64, 0)
        };
        assert!(matches!(sensor.validate(), Err(ProfileError::Missing { .. })));
        let poisson_sensor = FlowSpec::periodic_sensor(2, IatModel::Poisson, 64, 0);
        assert!(matches!(poisson_sensor.validate(), Err(ProfileError::IncompatibleModel { .. })));
        let dup = DeviceTrafficProfile::new(
            "x",
            vec![FlowSpec::constant_stream(1, 1e6, 100, 0), FlowSpec::constant_stream(1, 1e6, 100, 0)],
        );
        assert_eq!(dup.validate(), Err(ProfileError::DuplicateFlowId(1)));
    }

    #[test]
    fn seed_override_changes_every_flow() {
        let mut p = DeviceTrafficProfile::new(
            "x",
            vec![FlowSpec::constant_stream(1, 1e6, 100, 5), FlowSpec::constant_stream(2, 1e6, 100, 5)],
        );
        p.override_seeds(99);
        assert_ne!(p.flows[0].seed, p.flows[1].seed);
        assert_ne!(p.flows[0].seed, 5);
    }
}
