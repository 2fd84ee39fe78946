#![allow(dead_code)]

use std::sync::Mutex;

use sting_core::channel::{ChannelConfig, TransportConfig};
use sting_core::control::Envelope;
use sting_core::controller::executor::{execute_scenario, ExecuteError, ExecutorConfig, RunOptions};
use sting_core::controller::record::{RunEvent, RunRecord};
use sting_core::controller::registry::Registry;
use sting_core::controller::scenario::Scenario;
use sting_core::controller::testbed::{EmulatedTestbed, Testbed, TestbedError};
use sting_core::library::{build_functional_test_with, FunctionalParams};

pub const S: u64 = 1_000_000_000;

/// The functional scenario with short steps.
pub fn short_functional(step_s: f64) -> Scenario {
    build_functional_test_with(&FunctionalParams {
        step_duration_s: step_s,
        ..FunctionalParams::default()
    })
}

pub fn channel_of(s: &Scenario) -> ChannelConfig {
    match &s.transport {
        TransportConfig::Emulated(ch) => ch.clone(),
        other => panic!("expected an emulated transport, got {other:?}"),
    }
}

pub fn testbed_for(s: &Scenario) -> EmulatedTestbed {
    let ids: Vec<String> = s.devices.iter().map(|d| d.device_id.clone()).collect();
    EmulatedTestbed::with_agents(channel_of(s), &ids, None)
}

pub fn run_on(tb: &mut dyn Testbed, s: &Scenario, run_id: &str) -> Result<RunRecord, ExecuteError> {
    let registry = Mutex::new(Registry::default());
    execute_scenario(tb, s, &registry, &RunOptions::new(run_id, ExecutorConfig::virtual_time()))
}

pub fn events<'a>(r: &'a RunRecord) -> impl Iterator<Item = &'a RunEvent> + 'a {
    r.events.iter().map(|e| &e.event)
}

/// Wraps an emulated testbed with hooks that fire on the virtual clock or
/// rewrite outbound control messages.
pub struct Hooked<F, G> {
    pub inner: EmulatedTestbed,
    pub on_time: F,
    pub on_publish: G,
}

impl<F, G> Testbed for Hooked<F, G>
where
    F: FnMut(&mut EmulatedTestbed),
    G: FnMut(&mut Envelope),
{
    fn now_ns(&self) -> u64 {
        self.inner.now_ns()
    }

    fn publish(&mut self, mut env: Envelope) -> Result<(), TestbedError> {
        (self.on_publish)(&mut env);
        self.inner.publish(env)
    }

    fn poll(&mut self, deadline_ns: u64) -> Result<Vec<Envelope>, TestbedError> {
        (self.on_time)(&mut self.inner);
        self.inner.poll(deadline_ns)
    }

    fn collector_addr(&self) -> String {
        self.inner.collector_addr()
    }

    fn virtual_time(&self) -> bool {
        true
    }

    fn transport_name(&self) -> String {
        self.inner.transport_name()
    }
}
