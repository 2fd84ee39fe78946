//! Choosing where a scenario runs.

use std::sync::Arc;

use sting_core::channel::TransportConfig;
use sting_core::control::Bus;
use sting_core::controller::executor::ExecutorConfig;
use sting_core::controller::scenario::Scenario;
use sting_core::controller::testbed::{EmulatedTestbed, Testbed};

use crate::relay::ChannelRelay;
use crate::testbed::RealTestbed;
use crate::udp::{RelayTransport, UdpTransport};

/// Builds a fresh testbed for each run.
pub trait TestbedFactory: Send + Sync {
    fn executor_config(&self) -> ExecutorConfig;

    /// Errors are reported to the caller as an unusable scenario.
    fn build(&self, scenario: &Scenario, seed_override: Option<u64>) -> Result<Box<dyn Testbed>, String>;
}

/// In-process agents for every referenced device on a virtual clock.
/// Requires an emulated transport.
#[derive(Debug, Default, Clone, Copy)]
pub struct VirtualTestbeds;

impl TestbedFactory for VirtualTestbeds {
    fn executor_config(&self) -> ExecutorConfig {
        ExecutorConfig::virtual_time()
    }

    fn build(&self, scenario: &Scenario, seed_override: Option<u64>) -> Result<Box<dyn Testbed>, String> {
        let TransportConfig::Emulated(channel) = &scenario.transport else {
            return Err("virtual-time execution needs an emulated transport".into());
        };
        let ids: Vec<String> = scenario.referenced_devices().into_iter().collect();
        Ok(Box::new(EmulatedTestbed::with_agents(channel.clone(), &ids, seed_override)))
    }
}

/// Real-time execution on the system clock.
///
/// * `udp` scenarios use a UDP collector and remote agents.
/// * `emulated` scenarios go through `relay` when one is configured, so
///   remote agents share the relay's bottleneck. Without a relay they run
///   as in-process agents on a system-clock emulated channel.
#[derive(Debug, Clone)]
pub struct LiveTestbeds {
    pub bus: Bus,
    /// Where the collector binds its data socket, e.g. `127.0.0.1:0`.
    pub collector_bind: String,
    pub relay: Option<Arc<ChannelRelay>>,
}

impl TestbedFactory for LiveTestbeds {
    fn executor_config(&self) -> ExecutorConfig {
        ExecutorConfig::real_time()
    }

    fn build(&self, scenario: &Scenario, seed_override: Option<u64>) -> Result<Box<dyn Testbed>, String> {
        let tb = match (&scenario.transport, &self.relay) {
            (TransportConfig::Udp, _) => {
                let t = UdpTransport::bind(&self.collector_bind).map_err(|e| e.to_string())?;
                RealTestbed::start(&self.bus, t, "udp")
            }
            (TransportConfig::Emulated(channel), Some(relay)) => {
                relay.reconfigure(channel.clone());
                let t = RelayTransport::bind(&self.collector_bind, relay.local_addr()).map_err(|e| e.to_string())?;
                RealTestbed::start(&self.bus, t, "emulated")
            }
            (TransportConfig::Emulated(channel), None) => {
                let ids: Vec<String> = scenario.referenced_devices().into_iter().collect();
                RealTestbed::loopback(&self.bus, channel.clone(), &ids, seed_override)
            }
        };
        tb.map(|t| Box::new(t) as Box<dyn Testbed>).map_err(|e| e.to_string())
    }
}
