//! Where a scenario executes. The executor only publishes control envelopes
//! and polls for replies, so the same loop drives an in-process emulated
//! testbed on a virtual clock and a networked one on the system clock.

use std::collections::{BTreeMap, HashSet, VecDeque};

use thiserror::Error;

use crate::agent::{Agent, AgentConfig};
use crate::channel::{ChannelConfig, ChannelError, TraceEntry};
use crate::collector::Collector;
use crate::control::{topic, Envelope};
use crate::controller::scenario::COLLECTOR_ID;
use crate::dataplane::Node;
use crate::sim::VirtualDataPlane;

#[derive(Debug, Error)]
pub enum TestbedError {
    #[error("emulated channel: {0}")]
    Channel(#[from] ChannelError),
    #[error("control plane: {0}")]
    Control(String),
    #[error("testbed closed")]
    Closed,
}

pub trait Testbed {
    fn now_ns(&self) -> u64;

    fn publish(&mut self, env: Envelope) -> Result<(), TestbedError>;

    /// Returns as soon as inbound messages are available, or at `deadline_ns`
    /// with an empty batch.
    fn poll(&mut self, deadline_ns: u64) -> Result<Vec<Envelope>, TestbedError>;

    /// Data-plane address agents send uplink traffic to.
    fn collector_addr(&self) -> String;

    fn virtual_time(&self) -> bool;

    fn transport_name(&self) -> String;
}

/// Agents, collector and channel in one process on a virtual clock. Control
/// messages are delivered instantly; data packets cross the emulated channel.
#[derive(Debug)]
pub struct EmulatedTestbed {
    data: VirtualDataPlane,
    agents: BTreeMap<String, Agent>,
    collector: Collector,
    inbox: VecDeque<Envelope>,
    partitioned: HashSet<String>,
    published: Vec<Envelope>,
    keep_published: bool,
}

impl EmulatedTestbed {
    pub fn new(channel: ChannelConfig) -> Self {
        let mut data = VirtualDataPlane::new(channel, 0);
        data.attach(COLLECTOR_ID);
        EmulatedTestbed {
            data,
            agents: BTreeMap::new(),
            collector: Collector::new(COLLECTOR_ID),
            inbox: VecDeque::new(),
            partitioned: HashSet::new(),
            published: Vec::new(),
            keep_published: false,
        }
    }

    /// Adds one agent per id, reachable at the same data address.
    pub fn with_agents<S: AsRef<str>>(channel: ChannelConfig, ids: &[S], seed_override: Option<u64>) -> Self {
        let mut tb = EmulatedTestbed::new(channel);
        for id in ids {
            let mut cfg = AgentConfig::new(id.as_ref(), id.as_ref());
            cfg.seed_override = seed_override;
            tb.add_agent(cfg).expect("agent without spool cannot fail");
        }
        tb
    }

    pub fn add_agent(&mut self, cfg: AgentConfig) -> std::io::Result<()> {
        let now = self.data.now_ns();
        self.data.attach(&cfg.data_addr);
        let agent = Agent::new(cfg, now)?;
        self.agents.insert(agent.device_id().to_string(), agent);
        Ok(())
    }

    pub fn agent(&self, device_id: &str) -> Option<&Agent> {
        self.agents.get(device_id)
    }

    /// Cuts a device off the control plane in both directions.
    pub fn partition(&mut self, device_id: &str, cut: bool) {
        if cut {
            self.partitioned.insert(device_id.to_string());
        } else {
            self.partitioned.remove(device_id);
        }
    }

    pub fn enable_trace(&mut self) {
        self.data.network_mut().enable_trace();
    }

    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        self.data.network_mut().take_trace()
    }

    /// Keep a copy of every envelope agents and the collector publish.
    pub fn record_published(&mut self, on: bool) {
        self.keep_published = on;
    }

    pub fn published(&self) -> &[Envelope] {
        &self.published
    }

    fn emit(&mut self, out: Vec<Envelope>) {
        for env in out {
            if topic::device_of(&env.topic).is_some_and(|d| self.partitioned.contains(d)) {
                continue;
            }
            if self.keep_published {
                self.published.push(env.clone());
            }
            self.inbox.push_back(env);
        }
    }

    /// Next agent or collector wakeup. Data-plane events in between are
    /// handled inside `step_to` since they never produce control messages.
    fn next_control_ns(&self) -> Option<u64> {
        let agent_wake = self.agents.values().map(Agent::next_wakeup_ns).min();
        [agent_wake, self.collector.next_wakeup_ns()].into_iter().flatten().min()
    }

    fn nodes<'a>(agents: &'a mut BTreeMap<String, Agent>, collector: &'a mut Collector) -> Vec<&'a mut Node> {
        let mut nodes: Vec<&mut Node> = agents.values_mut().filter_map(Agent::data_plane_mut).collect();
        nodes.extend(collector.data_plane_mut());
        nodes
    }

    fn step_to(&mut self, t: u64) -> Result<(), TestbedError> {
        {
            let mut nodes = Self::nodes(&mut self.agents, &mut self.collector);
            self.data.advance(t, &mut nodes)?;
        }
        let mut out = self.collector.tick(t);
        for agent in self.agents.values_mut() {
            out.extend(agent.tick(t));
        }
        self.emit(out);
        Ok(())
    }
}

impl Testbed for EmulatedTestbed {
    fn now_ns(&self) -> u64 {
        self.data.now_ns()
    }

    fn publish(&mut self, env: Envelope) -> Result<(), TestbedError> {
        let now = self.now_ns();
        let out = if env.topic == topic::COLLECTOR_COMMAND {
            self.collector.handle(&env, now)
        } else if let Some(device) = topic::device_of(&env.topic) {
            if self.partitioned.contains(device) {
                return Ok(());
            }
            match self.agents.get_mut(device) {
                Some(agent) => agent.handle(&env, now),
                None => Vec::new(),
            }
        } else {
            Vec::new()
        };
        self.emit(out);
        Ok(())
    }

    fn poll(&mut self, deadline_ns: u64) -> Result<Vec<Envelope>, TestbedError> {
        loop {
            if !self.inbox.is_empty() {
                return Ok(self.inbox.drain(..).collect());
            }
            let now = self.now_ns();
            if now >= deadline_ns {
                return Ok(Vec::new());
            }
            let t = self.next_control_ns().map_or(deadline_ns, |t| t.max(now).min(deadline_ns));
            self.step_to(t)?;
        }
    }

    fn collector_addr(&self) -> String {
        self.collector.addr().to_string()
    }

    fn virtual_time(&self) -> bool {
        true
    }

    fn transport_name(&self) -> String {
        "emulated".into()
    }
}
