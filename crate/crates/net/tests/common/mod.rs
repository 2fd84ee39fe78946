#![allow(dead_code)]

use sting_core::agent::AgentConfig;
use sting_core::channel::{ChannelConfig, TransportConfig};
use sting_core::controller::scenario::{Scenario, ScenarioMetadata, Step, SCENARIO_SCHEMA_VERSION};
use sting_core::library::{interferer_id, interferer_profile, sut_profile, SUT_DEVICE};
use sting_net::broker::ReconnectingClient;
use sting_net::runtime::{agent_filters, spawn_agent, RuntimeHandle};
use sting_net::udp::WaitTransport;

/// SUT plus `interferers` devices; step k activates the first `counts[k]`
/// interferers next to the SUT.
pub fn small_scenario(transport: TransportConfig, sut_bps: f64, interferer_bps: f64, counts: &[usize], step_s: f64) -> Scenario {
    let max = counts.iter().copied().max().unwrap_or(0);
    Scenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        scenario_id: "small".into(),
        sut_device: Some(SUT_DEVICE.into()),
        devices: std::iter::once(sut_profile(sut_bps))
            .chain((1..=max).map(|i| interferer_profile(i, interferer_bps)))
            .collect(),
        steps: counts
            .iter()
            .map(|&n| Step {
                label: format!("{n} interferers"),
                active_devices: std::iter::once(SUT_DEVICE.to_string()).chain((1..=n).map(interferer_id)).collect(),
                duration_s: step_s,
                repetitions: 1,
                tracked: true,
                profile_overrides: vec![],
            })
            .collect(),
        transport,
        window_s: 0.5,
        metadata: ScenarioMetadata::default(),
        clocks_synchronized: false,
    }
}

pub fn device_ids(s: &Scenario) -> Vec<String> {
    s.devices.iter().map(|d| d.device_id.clone()).collect()
}

pub fn emulated(capacity_bps: u64, buffer_bytes: u64) -> TransportConfig {
    TransportConfig::Emulated(ChannelConfig {
        capacity_bps,
        buffer_bytes,
        propagation_ns: 0,
    })
}

/// An agent that reaches the controller through the TCP broker.
pub fn remote_agent<T: WaitTransport + 'static>(broker: &str, id: &str, transport: T) -> RuntimeHandle {
    let link = ReconnectingClient::connect(broker, id, agent_filters(id)).expect("broker reachable");
    spawn_agent(AgentConfig::new(id, ""), transport, link).expect("agent thread")
}
