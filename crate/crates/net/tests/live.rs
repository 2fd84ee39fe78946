//! Real-time runs on the system clock: remote agents over the TCP broker
//! with UDP or relayed data planes, and the in-process loopback testbed.

mod common;

use std::time::Duration;

use common::{device_ids, emulated, remote_agent, small_scenario};
use sting_core::analysis::summarize;
use sting_core::channel::{ChannelConfig, TransportConfig};
use sting_core::controller::executor::ExecutorConfig;
use sting_core::controller::record::{RunEvent, RunRecord, RunStatus, StepStatus};
use sting_core::controller::store::RunStore;
use sting_core::controller::Controller;
use sting_core::library::SUT_DEVICE;
use sting_net::broker::Broker;
use sting_net::relay::ChannelRelay;
use sting_net::runtime::StatsSnapshot;
use sting_net::testbed::RealTestbed;
use sting_net::udp::{RelayTransport, UdpTransport};

fn controller() -> (tempfile::TempDir, Controller) {
    let dir = tempfile::tempdir().unwrap();
    let c = Controller::new(RunStore::open(dir.path().join("runs")).unwrap());
    (dir, c)
}

fn assert_complete(record: &RunRecord) {
    assert_eq!(record.status, RunStatus::Completed, "{:#?}", record.events);
    for step in &record.steps {
        assert_eq!(step.status, StepStatus::Completed, "step {}", step.step_index);
        for flow in &step.flows {
            assert!(flow.sender().is_some() && flow.receiver().is_some(), "step {} {:?}", step.step_index, flow);
        }
    }
}

/// Every agent armed for a step starts within the arm tolerance of the
/// common start time and never sends outside the step.
fn assert_departure_precision(stats: &[StatsSnapshot]) {
    for s in stats {
        assert!(s.departures > 0);
        assert_eq!(s.send_errors, 0);
        assert!(s.mean_lateness_ns < 1_000_000, "{s:?}");
        assert!(
            (s.late_over_1ms as f64) < 0.05 * s.departures as f64,
            "too many departures more than 1 ms late: {s:?}"
        );
    }
}

#[test]
fn udp_run_with_remote_agents_completes_without_loss() {
    let scenario = small_scenario(TransportConfig::Udp, 2e6, 1e6, &[0, 2], 1.5);
    let (_dir, ctl) = controller();
    let broker = Broker::start("127.0.0.1:0", ctl.bus().clone()).unwrap();
    let agents: Vec<_> = device_ids(&scenario)
        .iter()
        .map(|id| remote_agent(broker.local_addr(), id, UdpTransport::bind("127.0.0.1:0").unwrap()))
        .collect();
    let mut tb = RealTestbed::start(ctl.bus(), UdpTransport::bind("127.0.0.1:0").unwrap(), "udp").unwrap();
    let record = ctl.run_scenario(&mut tb, &scenario, ExecutorConfig::real_time()).unwrap();
    assert_complete(&record);
    assert_eq!(record.metadata.transport, "udp");
    assert!(!record.metadata.virtual_time);

    // Start times are common and results arrive once per flow.
    let starts: Vec<u64> = record
        .events
        .iter()
        .filter_map(|e| match e.event {
            RunEvent::StepStarted { start_ns, .. } => Some(start_ns),
            _ => None,
        })
        .collect();
    assert_eq!(starts.len(), 2);
    for step in &record.steps {
        for flow in &step.flows {
            let rx = flow.receiver().unwrap();
            assert_eq!(rx.loss_ratio, Some(0.0), "{}/{} lost packets on loopback", flow.device_id, flow.flow_id);
        }
    }
    let summary = summarize(std::slice::from_ref(&record), SUT_DEVICE);
    let rtt_ms = summary[0].rtt_p50_ns.unwrap() / 1e6;
    assert!(rtt_ms < 5.0, "loopback RTT p50 {rtt_ms} ms");
    let stats: Vec<StatsSnapshot> = agents.into_iter().map(|a| a.stop()).collect();
    eprintln!("udp departure timing: {stats:?}");
    assert_departure_precision(&stats);
}

#[test]
fn relayed_emulated_channel_imposes_the_bottleneck_on_remote_agents() {
    // 4 Mbit/s medium. Alone the SUT's 2 Mbit/s fits; next to two
    // 3 Mbit/s interferers the medium saturates.
    let scenario = small_scenario(emulated(4_000_000, 50_000), 2e6, 3e6, &[0, 2], 2.0);
    let (_dir, ctl) = controller();
    let broker = Broker::start("127.0.0.1:0", ctl.bus().clone()).unwrap();
    let relay = ChannelRelay::start("127.0.0.1:0", ChannelConfig::default()).unwrap();
    let _agents: Vec<_> = device_ids(&scenario)
        .iter()
        .map(|id| remote_agent(broker.local_addr(), id, RelayTransport::bind("127.0.0.1:0", relay.local_addr()).unwrap()))
        .collect();
    let TransportConfig::Emulated(channel) = &scenario.transport else { unreachable!() };
    relay.reconfigure(channel.clone());
    let collector = RelayTransport::bind("127.0.0.1:0", relay.local_addr()).unwrap();
    let mut tb = RealTestbed::start(ctl.bus(), collector, "emulated").unwrap();
    let record = ctl.run_scenario(&mut tb, &scenario, ExecutorConfig::real_time()).unwrap();
    assert_complete(&record);

    let summary = summarize(std::slice::from_ref(&record), SUT_DEVICE);
    let (alone, loaded) = (&summary[0], &summary[1]);
    let alone_bps = alone.mean_throughput_bps.unwrap();
    let loaded_bps = loaded.mean_throughput_bps.unwrap();
    assert!(alone_bps > 1.6e6, "SUT alone {alone_bps}");
    assert!(loaded_bps < 0.8 * alone_bps, "SUT goodput {alone_bps} -> {loaded_bps}");
    assert!(loaded.loss_ratio.unwrap() > alone.loss_ratio.unwrap_or(0.0));
    assert!(loaded.rtt_p50_ns.unwrap() > 2.0 * alone.rtt_p50_ns.unwrap());

    // Aggregate delivered rate never exceeds the medium.
    let step = &record.steps[1];
    let total_bps: f64 = step
        .flows
        .iter()
        .filter_map(|f| f.receiver().and_then(|r| r.mean_throughput_bps))
        .sum();
    assert!(total_bps <= 4_000_000.0 * 1.05, "delivered {total_bps} over a 4 Mbit/s medium");
    assert!(relay.stats().dropped > 0);
}

#[test]
fn loopback_testbed_runs_in_process_agents_in_real_time() {
    let scenario = small_scenario(emulated(20_000_000, 250_000), 2e6, 1e6, &[0, 2], 1.0);
    let (_dir, ctl) = controller();
    let mut tb = RealTestbed::loopback(ctl.bus(), common_channel(&scenario), &device_ids(&scenario), Some(7)).unwrap();
    assert_eq!(tb.local_agents().len(), 3);
    let t0 = std::time::Instant::now();
    let record = ctl.run_scenario(&mut tb, &scenario, ExecutorConfig::real_time()).unwrap();
    assert_complete(&record);
    assert!(t0.elapsed() >= Duration::from_secs(2), "steps must take wall-clock time");
    assert_eq!(record.metadata.transport, "emulated");
}

#[test]
fn missing_remote_agent_makes_the_run_unreachable() {
    let scenario = small_scenario(TransportConfig::Udp, 1e6, 1e6, &[0], 1.0);
    let (_dir, ctl) = controller();
    let mut tb = RealTestbed::start(ctl.bus(), UdpTransport::bind("127.0.0.1:0").unwrap(), "udp").unwrap();
    let mut cfg = ExecutorConfig::real_time();
    cfg.registration_timeout_ns = 300_000_000;
    let err = ctl.run_scenario(&mut tb, &scenario, cfg).unwrap_err();
    assert!(err.to_string().contains(SUT_DEVICE), "{err}");
}

fn common_channel(s: &sting_core::controller::scenario::Scenario) -> ChannelConfig {
    match &s.transport {
        TransportConfig::Emulated(c) => c.clone(),
        TransportConfig::Udp => panic!("expected emulated"),
    }
}
