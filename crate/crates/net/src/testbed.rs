//! [`Testbed`] on the system clock: control envelopes travel over the
//! controller's bus (and through the broker to remote agents), data packets
//! over a real or relayed transport.

use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use sting_core::agent::AgentConfig;
use sting_core::channel::{system_now_ns, ChannelConfig, EmulatedEndpoint, EmulatedNetwork, NetworkClock};
use sting_core::control::{topic, Bus, Envelope, SubscriptionId};
use sting_core::controller::testbed::{Testbed, TestbedError};

use crate::broker::BusLink;
use crate::runtime::{agent_filters, collector_filters, spawn_agent, spawn_collector, RuntimeHandle};
use crate::udp::WaitTransport;

#[derive(Debug)]
pub struct RealTestbed {
    bus: Bus,
    subs: Vec<SubscriptionId>,
    inbox: mpsc::Receiver<Envelope>,
    collector: RuntimeHandle,
    collector_addr: String,
    transport: String,
    /// In-process agents whose lifetime is tied to this testbed.
    local_agents: Vec<RuntimeHandle>,
}

impl RealTestbed {
    /// Starts the collector on `collector_transport` and listens for agent
    /// and collector replies on `bus`.
    pub fn start<T: WaitTransport + 'static>(bus: &Bus, collector_transport: T, transport: &str) -> std::io::Result<Self> {
        let (tx, rx) = mpsc::channel();
        let subs = [topic::ALL_AGENT_STATUS, topic::ALL_AGENT_RESULTS, topic::COLLECTOR_RESULTS]
            .iter()
            .map(|f| {
                let tx = tx.clone();
                bus.subscribe_fn(f, move |env| {
                    let _ = tx.send(env.clone());
                })
            })
            .collect();
        let collector_addr = collector_transport.local_addr();
        let collector = spawn_collector(collector_transport, BusLink::new(bus, &collector_filters()))?;
        Ok(RealTestbed {
            bus: bus.clone(),
            subs,
            inbox: rx,
            collector,
            collector_addr,
            transport: transport.to_string(),
            local_agents: Vec::new(),
        })
    }

    /// Agents, collector and a system-clock emulated channel, all in this
    /// process: real-time execution with the emulated bottleneck and no
    /// sockets.
    pub fn loopback<S: AsRef<str>>(
        bus: &Bus,
        channel: ChannelConfig,
        device_ids: &[S],
        seed_override: Option<u64>,
    ) -> std::io::Result<Self> {
        let net: Arc<Mutex<EmulatedNetwork>> = EmulatedNetwork::shared(channel, NetworkClock::System);
        let collector = EmulatedEndpoint::attach(&net, sting_core::controller::scenario::COLLECTOR_ID);
        let mut tb = RealTestbed::start(bus, collector, "emulated")?;
        for id in device_ids {
            let id = id.as_ref();
            let mut cfg = AgentConfig::new(id, id);
            cfg.seed_override = seed_override;
            let endpoint = EmulatedEndpoint::attach(&net, id);
            tb.adopt(spawn_agent(cfg, endpoint, BusLink::new(bus, &agent_filters(id)))?);
        }
        Ok(tb)
    }

    /// Ties an already running agent to this testbed's lifetime.
    pub fn adopt(&mut self, agent: RuntimeHandle) {
        self.local_agents.push(agent);
    }

    pub fn collector(&self) -> &RuntimeHandle {
        &self.collector
    }

    pub fn local_agents(&self) -> &[RuntimeHandle] {
        &self.local_agents
    }
}

impl Drop for RealTestbed {
    fn drop(&mut self) {
        for id in self.subs.drain(..) {
            self.bus.unsubscribe(id);
        }
    }
}

impl Testbed for RealTestbed {
    fn now_ns(&self) -> u64 {
        system_now_ns()
    }

    fn publish(&mut self, env: Envelope) -> Result<(), TestbedError> {
        self.bus.publish(&env);
        Ok(())
    }

    fn poll(&mut self, deadline_ns: u64) -> Result<Vec<Envelope>, TestbedError> {
        if self.collector.is_finished() {
            return Err(TestbedError::Control("collector runtime stopped".into()));
        }
        let wait = Duration::from_nanos(deadline_ns.saturating_sub(system_now_ns()));
        let first = match self.inbox.recv_timeout(wait) {
            Ok(env) => env,
            Err(mpsc::RecvTimeoutError::Timeout) => return Ok(Vec::new()),
            Err(mpsc::RecvTimeoutError::Disconnected) => return Err(TestbedError::Closed),
        };
        let mut batch = vec![first];
        batch.extend(self.inbox.try_iter());
        Ok(batch)
    }

    fn collector_addr(&self) -> String {
        self.collector_addr.clone()
    }

    fn virtual_time(&self) -> bool {
        false
    }

    fn transport_name(&self) -> String {
        self.transport.clone()
    }
}
