mod common;

use std::collections::{BTreeMap, HashMap};

use common::*;
use proptest::prelude::*;
use sting_core::agent::{Agent, AgentConfig};
use sting_core::channel::{ChannelConfig, EmulatedChannel, EnqueueResult};
use sting_core::control::{topic, Body, Command, ConfigMessage, Envelope, Lifecycle};
use sting_core::controller::record::RunEvent;
use sting_core::metrics::{FlowMetrics, MetricsConfig};
use sting_core::probe::{PacketType, ProbeError, ProbePacket, HEADER_LEN};
use sting_core::traffic::{DeviceTrafficProfile, FlowSpec, IatModel, Schedule};

fn packet_type() -> impl Strategy<Value = PacketType> {
    prop_oneof![Just(PacketType::Data), Just(PacketType::EchoRequest), Just(PacketType::EchoReply)]
}

fn probe_packet() -> impl Strategy<Value = ProbePacket> {
    (packet_type(), any::<u16>(), any::<u64>(), any::<[u64; 3]>(), any::<u32>(), 1..=u16::MAX)
        .prop_flat_map(|(t, flow, seq, ts, frame, count)| {
            (0..count).prop_map(move |index| ProbePacket {
                packet_type: t,
                flow_id: flow,
                seq,
                tx_timestamp_ns: ts[0],
                responder_rx_ns: ts[1],
                responder_tx_ns: ts[2],
                frame_id: frame,
                fragment_index: index,
                fragment_count: count,
            })
        })
}

/// A mix of flow kinds with distinct ids.
fn profile() -> impl Strategy<Value = DeviceTrafficProfile> {
    let flow = prop_oneof![
        (1e5..5e7f64, 48..1500u32).prop_map(|(r, p)| FlowSpec::constant_stream(0, r, p, 0)),
        (1e5..5e7f64, 48..1500u32).prop_map(|(r, p)| {
            let mut f = FlowSpec::constant_stream(0, r, p, 0);
            f.iat_model = Some(IatModel::Poisson);
            f
        }),
        (1e-3..0.1f64, 48..400u32).prop_map(|(m, p)| FlowSpec::periodic_sensor(0, IatModel::Exponential { mean_s: m }, p, 0)),
        (1e-3..0.1f64, 48..400u32).prop_map(|(m, p)| FlowSpec::periodic_sensor(0, IatModel::Deterministic { period_s: m }, p, 0)),
        (0.01..0.5f64, 0.01..0.5f64, 1e6..5e7f64).prop_map(|(on, off, r)| FlowSpec::bursty(0, on, off, r, 1000, 0)),
        (5.0..60.0f64, 500..60_000u32, 200..1500u32).prop_map(|(fps, fb, p)| FlowSpec::frame_video(0, fps, fb, p, 0)),
    ];
    (prop::collection::vec(flow, 1..5), any::<u64>()).prop_map(|(flows, seed)| {
        let flows = flows
            .into_iter()
            .enumerate()
            .map(|(i, mut f)| {
                f.flow_id = i as u16 + 1;
                f.seed = seed.wrapping_add(i as u64);
                f
            })
            .collect();
        DeviceTrafficProfile::new("d", flows)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codec_round_trips(p in probe_packet(), size in HEADER_LEN..2000usize) {
        let bytes = p.encode(size).unwrap();
        prop_assert_eq!(bytes.len(), size);
        prop_assert_eq!(&bytes[..HEADER_LEN], &p.encode_header().unwrap()[..]);
        prop_assert_eq!(ProbePacket::decode(&bytes), Ok(p));
    }

    #[test]
    fn decode_validates_magic_version_and_fragments(p in probe_packet(), byte in 0..6usize, flip in 1..=255u8) {
        let mut bytes = p.encode_header().unwrap();
        bytes[byte] ^= flip;
        let r = ProbePacket::decode(&bytes);
        match byte {
            0..=3 => prop_assert_eq!(r, Err(ProbeError::BadMagic)),
            4 => prop_assert_eq!(r, Err(ProbeError::BadVersion(1 ^ flip))),
            _ => prop_assert!(matches!(r, Err(ProbeError::UnknownType(_))) || r.is_ok()),
        }
        let mut bad = p;
        bad.fragment_index = bad.fragment_count;
        let rejected = matches!(bad.encode_header(), Err(ProbeError::BadFragment { .. }));
        prop_assert!(rejected);
        prop_assert!(ProbePacket::decode(&bytes[..HEADER_LEN - 1]).is_err());
    }

    #[test]
    fn schedules_are_deterministic_and_ordered(p in profile()) {
        let a: Vec<_> = Schedule::from_profile(&p).take(3000).collect();
        let b: Vec<_> = Schedule::from_profile(&p).take(3000).collect();
        prop_assert_eq!(&a, &b);
        let mut next_seq: HashMap<u16, u64> = HashMap::new();
        for w in a.windows(2) {
            prop_assert!((w[0].time_s, w[0].flow_id) <= (w[1].time_s, w[1].flow_id));
        }
        for d in &a {
            let expected = next_seq.entry(d.flow_id).or_insert(0);
            prop_assert_eq!(d.seq, *expected);
            *expected += 1;
        }
    }

    #[test]
    fn frame_video_emits_whole_frames(fps in 5.0..60.0f64, frame_bytes in 500..60_000u32, payload in 200..1500u32) {
        let f = FlowSpec::frame_video(1, fps, frame_bytes, payload, 9);
        let count = f.fragment_count();
        let deps: Vec<_> = Schedule::new(&[f]).take(usize::from(count) * 20).collect();
        let mut frames: BTreeMap<u32, Vec<(u16, u16, f64, u32)>> = BTreeMap::new();
        for d in &deps {
            let slot = d.frame.expect("video departures carry a frame slot");
            frames.entry(slot.frame_id).or_default().push((slot.fragment_index, slot.fragment_count, d.time_s, d.wire_bytes));
        }
        prop_assert_eq!(frames.len(), 20);
        for (id, frags) in &frames {
            prop_assert_eq!(frags.len(), usize::from(count));
            prop_assert!(frags.iter().enumerate().all(|(i, f)| usize::from(f.0) == i && f.1 == count));
            let period = 1.0 / fps;
            prop_assert!(frags.iter().all(|f| f.2 >= f64::from(*id) * period - 1e-9 && f.2 < f64::from(id + 1) * period));
            // Full fragments, then the remainder padded up to a bare header.
            let full = u64::from(count - 1) * u64::from(payload);
            let last = (u64::from(frame_bytes) - full).max(HEADER_LEN as u64);
            prop_assert_eq!(frags.iter().map(|f| u64::from(f.3)).sum::<u64>(), full + last);
        }
    }

    #[test]
    fn deterministic_rates_converge_within_one_percent(rate in 1e5..1e8f64, payload in 48..1500u32) {
        let f = FlowSpec::constant_stream(1, rate, payload, 1);
        let iat = f64::from(payload) * 8.0 / rate;
        let t = 1000.0 * iat;
        let n = Schedule::new(&[f]).take_while(|d| d.time_s <= t).count();
        let measured = n as f64 * f64::from(payload) * 8.0 / t;
        prop_assert!((measured - rate).abs() / rate <= 0.01, "{} vs {}", measured, rate);
    }

    #[test]
    fn poisson_rates_converge_within_one_percent(rate in 1e6..1e8f64, payload in 48..1500u32, seed in any::<u64>()) {
        // 4e5 mean inter-arrival times: one percent is six standard deviations.
        let mut f = FlowSpec::constant_stream(1, rate, payload, seed);
        f.iat_model = Some(IatModel::Poisson);
        let t = 4e5 * f64::from(payload) * 8.0 / rate;
        let n = Schedule::new(&[f]).take_while(|d| d.time_s <= t).count();
        let measured = n as f64 * f64::from(payload) * 8.0 / t;
        prop_assert!((measured - rate).abs() / rate <= 0.01, "{} vs {}", measured, rate);
    }

    #[test]
    fn metrics_conserve_bytes_and_bound_counts(
        arrivals in prop::collection::vec((0..5_000u64, 0..3_000_000_000u64, 48..1500u32, 0..1_000_000u64), 0..400),
        window_ms in 100..2000u64,
    ) {
        let start = 1_000_000_000;
        let window_ns = window_ms * 1_000_000;
        let mut m = FlowMetrics::new(1, start, MetricsConfig { window_ns, ..MetricsConfig::default() });
        for &(seq, offset, wire, delay) in &arrivals {
            let tx = start + offset;
            m.ingest(&ProbePacket::data(1, seq, tx), tx + delay, wire);
        }
        let end = start + 3_000_000_000 + 1_000_000;
        let r = m.finalize(end);
        prop_assert_eq!(r.windows.iter().map(|w| w.rx_bytes).sum::<u64>(), r.rx_bytes);
        prop_assert_eq!(r.windows.iter().map(|w| w.rx_packets).sum::<u64>(), r.rx_packets);
        prop_assert!((1..r.windows.len()).all(|i| r.window_start_ns(i) - r.window_start_ns(i - 1) == window_ns));
        prop_assert!(r.throughput_bps.iter().all(|&t| t >= 0.0));
        prop_assert!(r.jitter_ns >= 0.0);
        prop_assert_eq!(r.rx_packets + r.duplicate_count, arrivals.len() as u64);
        if let Some(max) = r.max_seq {
            prop_assert!(r.rx_packets <= max + 1 + r.duplicate_count);
            prop_assert!(r.loss_ratio.unwrap() >= 0.0);
        }
    }

    #[test]
    fn channel_is_a_work_conserving_bounded_fifo(
        gaps in prop::collection::vec((0..200_000u64, 48..1500u32), 1..600),
        capacity_mbps in 1..200u64,
        buffer_pkts in 1..200u64,
    ) {
        let config = ChannelConfig {
            capacity_bps: capacity_mbps * 1_000_000,
            buffer_bytes: buffer_pkts * 1500,
            propagation_ns: 1_000_000,
        };
        let mut ch = EmulatedChannel::new(config.clone());
        ch.attach("a");
        ch.attach("b");
        let mut now = 0;
        let mut sent = Vec::new();
        let mut prev_completion = 0;
        for (i, &(gap, wire)) in gaps.iter().enumerate() {
            now += gap;
            let payload = (i as u32).to_be_bytes().to_vec();
            if let EnqueueResult::Queued { completion_ns, delivery_ns } = ch.transmit("a", "b", payload.clone(), wire, now).unwrap() {
                // The server starts as soon as it is free or the packet arrives.
                prop_assert_eq!(completion_ns, now.max(prev_completion) + config.service_ns(wire));
                prop_assert_eq!(delivery_ns, completion_ns + config.propagation_ns);
                prev_completion = completion_ns;
                sent.push((payload, wire, delivery_ns));
            }
            prop_assert!(ch.occupancy(now) <= config.buffer_bytes);
        }
        let stats = ch.stats();
        prop_assert!(stats.max_queued_bytes <= config.buffer_bytes);
        prop_assert_eq!(stats.enqueued + stats.dropped, gaps.len() as u64);
        let delivered = ch.advance(u64::MAX);
        prop_assert_eq!(delivered.len(), sent.len());
        for (d, (payload, wire, at)) in delivered.iter().zip(&sent) {
            prop_assert_eq!(&d.bytes, payload);
            prop_assert_eq!(d.wire_bytes, *wire);
            prop_assert_eq!(d.delivery_ns, *at);
        }
        // Bytes delivered after any delivery instant, within the next second,
        // never exceed one second of capacity.
        let budget = config.capacity_bps / 8;
        for (i, d) in delivered.iter().enumerate() {
            let in_window: u64 = delivered[i + 1..]
                .iter()
                .take_while(|e| e.delivery_ns <= d.delivery_ns + S)
                .map(|e| u64::from(e.wire_bytes))
                .sum();
            prop_assert!(in_window <= budget);
        }
    }

    #[test]
    fn underloaded_channel_never_drops(rate_frac in 0.05..0.95f64, wire in 48..1500u32) {
        let config = ChannelConfig { capacity_bps: 10_000_000, buffer_bytes: 3000, propagation_ns: 0 };
        let mut ch = EmulatedChannel::new(config.clone());
        ch.attach("a");
        let gap = (config.service_ns(wire) as f64 / rate_frac).ceil() as u64;
        for i in 0..2000u64 {
            match ch.transmit("a", "a", Vec::new(), wire, i * gap).unwrap() {
                EnqueueResult::Queued { delivery_ns, .. } => prop_assert_eq!(delivery_ns, i * gap + config.service_ns(wire)),
                EnqueueResult::Dropped => prop_assert!(false, "drop at packet {}", i),
            }
        }
    }

    #[test]
    fn agent_commands_are_idempotent_by_msg_id(repeats in prop::collection::vec(1..4usize, 3)) {
        let mut agent = Agent::new(AgentConfig::new("a1", "a1"), 0).unwrap();
        let profile = DeviceTrafficProfile::new("a1", vec![FlowSpec::constant_stream(1, 1e6, 500, 3)]);
        let config = Envelope::new(topic::agent_config("a1"), "m1", 0, Body::Config(ConfigMessage {
            run_id: "r".into(),
            step_index: 0,
            profile,
            collector_addr: "col".into(),
            window_ns: S,
            clocks_synchronized: false,
        }));
        let arm = Envelope::new(topic::agent_command("a1"), "m2", 0, Body::Command(Command::Arm {
            run_id: "r".into(),
            step_index: 0,
            start_ns: S,
            stop_ns: 2 * S,
        }));
        let abort = Envelope::new(topic::agent_command("a1"), "m3", 0, Body::Command(Command::Abort { run_id: "r".into() }));
        for (env, n, state) in [(&config, repeats[0], Lifecycle::Configured), (&arm, repeats[1], Lifecycle::Running), (&abort, repeats[2], Lifecycle::Idle)] {
            let first = agent.handle(env, 0);
            prop_assert!(!first.is_empty());
            for _ in 1..n {
                prop_assert!(agent.handle(env, 0).is_empty());
            }
            prop_assert_eq!(agent.lifecycle(), state);
        }
    }
}

#[test]
fn agent_lifecycle_follows_the_state_machine() {
    let s = short_functional(2.0);
    let mut tb = testbed_for(&s);
    tb.record_published(true);
    let r = run_on(&mut tb, &s, "run-lifecycle").unwrap();
    let mut seen: BTreeMap<String, Vec<Lifecycle>> = BTreeMap::new();
    for env in tb.published() {
        let (device, state) = match &env.body {
            Body::Status(st) => (st.device_id.clone(), st.lifecycle),
            Body::ConfigAck(ack) if ack.ok => (ack.device_id.clone(), Lifecycle::Configured),
            Body::Results(res) => (res.device_id.clone(), Lifecycle::Reporting),
            _ => continue,
        };
        let states = seen.entry(device).or_default();
        if states.last() != Some(&state) {
            states.push(state);
        }
    }
    use Lifecycle::*;
    for (device, states) in &seen {
        assert_eq!(states[0], Idle, "{device}");
        for w in states.windows(2) {
            let ok = matches!((w[0], w[1]), (Idle, Configured) | (Configured, Running) | (Running, Reporting) | (Reporting, Idle));
            assert!(ok, "{device}: {:?} -> {:?} in {states:?}", w[0], w[1]);
        }
    }
    assert_eq!(seen["sting-08"].iter().filter(|s| **s == Running).count(), 1);
    assert_eq!(seen["sut"].iter().filter(|s| **s == Running).count(), 5);

    // Every acked config hash is the one the record keeps.
    for e in &r.events {
        if let RunEvent::ConfigAcked { step_index, device_id, config_hash } = &e.event {
            assert_eq!(r.steps[*step_index].config_hashes.get(device_id), Some(config_hash));
        }
    }
}
