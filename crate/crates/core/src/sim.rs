//! Virtual-time driver for data-plane nodes on an emulated channel.
//!
//! [`VirtualDataPlane`] interleaves channel deliveries and scheduled
//! departures in strict time order (deliveries first on ties), so a run is a
//! pure function of its profiles and seeds. [`simulate_step`] runs one step
//! without a control plane; [`sweep`] runs many independent steps, in
//! parallel when the `parallel` feature is on.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, ChannelError, ChannelStats, Delivery, EmulatedNetwork, NetworkClock, TraceEntry};
use crate::controller::record::FlowOutcome;
use crate::controller::scenario::COLLECTOR_ID;
use crate::dataplane::{FlowKey, Node, NodeStats, Outgoing, Peer};
use crate::metrics::DEFAULT_WINDOW_NS;
use crate::parallel::{map_collect, Execution};
use crate::traffic::{offered_load, DeviceTrafficProfile};

#[derive(Debug)]
pub struct VirtualDataPlane {
    net: EmulatedNetwork,
    scratch: Vec<Delivery>,
}

impl VirtualDataPlane {
    pub fn new(config: ChannelConfig, start_ns: u64) -> Self {
        VirtualDataPlane {
            net: EmulatedNetwork::new(config, NetworkClock::Virtual(start_ns)),
            scratch: Vec::new(),
        }
    }

    pub fn attach(&mut self, name: &str) {
        self.net.attach(name);
    }

    pub fn now_ns(&self) -> u64 {
        self.net.now_ns()
    }

    pub fn network(&self) -> &EmulatedNetwork {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut EmulatedNetwork {
        &mut self.net
    }

    /// Earliest pending event among the channel and `nodes`.
    pub fn next_event_ns(&self, nodes: &[&mut Node]) -> Option<u64> {
        let dep = nodes.iter().filter_map(|n| n.next_departure_ns()).min();
        match (self.net.channel().next_delivery_ns(), dep) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    fn send(&mut self, src: &str, out: Outgoing) -> Result<(), ChannelError> {
        self.net.transmit(src, &out.dst, out.header.to_vec(), out.wire_bytes).map(|_| ())
    }

    /// Processes every event up to and including `until_ns`, then parks the
    /// clock at `until_ns`. Deliveries to addresses without a node are lost.
    pub fn advance(&mut self, until_ns: u64, nodes: &mut [&mut Node]) -> Result<(), ChannelError> {
        let index: HashMap<String, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.local_addr().to_string(), i))
            .collect();
        while let Some(t) = self.next_event_ns(nodes).filter(|&t| t <= until_ns) {
            self.net.set_now(t);
            let mut due = std::mem::take(&mut self.scratch);
            self.net.channel_mut().advance_into(t, &mut due);
            for d in due.drain(..) {
                let Some(&i) = index.get(&*d.dst) else { continue };
                if let Some(reply) = nodes[i].on_datagram(&d.src, &d.bytes, d.wire_bytes, d.delivery_ns, t) {
                    self.send(&d.dst, reply)?;
                }
            }
            self.scratch = due;
            for node in nodes.iter_mut() {
                while let Some(out) = node.poll_departure(t) {
                    let src = node.local_addr().clone();
                    self.send(&src, out)?;
                }
            }
        }
        self.net.set_now(until_ns);
        Ok(())
    }
}

/// One self-contained step: every profile talks to a single collector over
/// one shared channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub channel: ChannelConfig,
    pub start_ns: u64,
    pub stop_ns: u64,
    pub window_ns: u64,
    pub profiles: Vec<DeviceTrafficProfile>,
    #[serde(default)]
    pub trace: bool,
}

impl StepPlan {
    pub fn new(channel: ChannelConfig, duration_ns: u64, profiles: Vec<DeviceTrafficProfile>) -> Self {
        StepPlan {
            channel,
            start_ns: 0,
            stop_ns: duration_ns,
            window_ns: DEFAULT_WINDOW_NS,
            profiles,
            trace: false,
        }
    }

    pub fn offered_load_bps(&self) -> f64 {
        self.profiles.iter().map(offered_load).sum()
    }
}

#[derive(Debug, Clone)]
pub struct StepSimOutcome {
    pub flows: Vec<FlowOutcome>,
    pub channel: ChannelStats,
    pub node_stats: BTreeMap<String, NodeStats>,
    pub trace: Vec<TraceEntry>,
}

impl StepSimOutcome {
    pub fn flow(&self, device_id: &str, flow_id: u16) -> Option<&FlowOutcome> {
        self.flows.iter().find(|f| f.device_id == device_id && f.flow_id == flow_id)
    }
}

/// Pairs agent-side and collector-side reports into per-flow outcomes.
pub(crate) fn pair_reports(
    profiles: &[DeviceTrafficProfile],
    agent: &BTreeMap<FlowKey, crate::metrics::FlowReport>,
    collector: &BTreeMap<FlowKey, crate::metrics::FlowReport>,
) -> Vec<FlowOutcome> {
    profiles
        .iter()
        .flat_map(|p| {
            p.flows.iter().map(move |f| {
                let key = FlowKey::new(p.device_id.clone(), f.flow_id);
                FlowOutcome {
                    device_id: p.device_id.clone(),
                    flow_id: f.flow_id,
                    kind: f.kind,
                    direction: f.direction,
                    offered_load_bps: f.offered_load_bps(),
                    agent: agent.get(&key).cloned(),
                    collector: collector.get(&key).cloned(),
                }
            })
        })
        .collect()
}

pub fn simulate_step(plan: &StepPlan) -> Result<StepSimOutcome, ChannelError> {
    let mut data = VirtualDataPlane::new(plan.channel.clone(), plan.start_ns);
    if plan.trace {
        data.network_mut().enable_trace();
    }
    data.attach(COLLECTOR_ID);
    // Same node order as the emulated testbed, so equal-time departures
    // enter the channel identically.
    let mut ordered: Vec<&DeviceTrafficProfile> = plan.profiles.iter().collect();
    ordered.sort_by(|a, b| a.device_id.cmp(&b.device_id));
    let mut agents: Vec<Node> = ordered
        .into_iter()
        .map(|p| {
            data.attach(&p.device_id);
            Node::with_window_for_agent(p, &p.device_id, COLLECTOR_ID, plan.start_ns, plan.stop_ns, plan.window_ns)
        })
        .collect();
    let peers: Vec<Peer> = plan
        .profiles
        .iter()
        .map(|p| Peer {
            device_id: p.device_id.clone(),
            data_addr: p.device_id.clone(),
            profile: p.clone(),
        })
        .collect();
    let mut collector = Node::for_collector(COLLECTOR_ID, &peers, plan.start_ns, plan.stop_ns, plan.window_ns);

    {
        let mut nodes: Vec<&mut Node> = agents.iter_mut().collect();
        nodes.push(&mut collector);
        if plan.stop_ns > plan.start_ns {
            data.advance(plan.stop_ns, &mut nodes)?;
        }
    }

    let end = plan.stop_ns.max(plan.start_ns);
    let agent_reports: BTreeMap<_, _> = agents.iter().flat_map(|n| n.finalize(end)).collect();
    let collector_reports: BTreeMap<_, _> = collector.finalize(end).into_iter().collect();
    let mut node_stats: BTreeMap<String, NodeStats> =
        agents.iter().map(|n| (n.local_addr().to_string(), *n.stats())).collect();
    node_stats.insert(COLLECTOR_ID.to_string(), *collector.stats());
    Ok(StepSimOutcome {
        flows: pair_reports(&plan.profiles, &agent_reports, &collector_reports),
        channel: data.network().channel().stats(),
        node_stats,
        trace: data.network_mut().take_trace(),
    })
}

/// Runs independent step plans, one simulation per plan.
pub fn sweep(plans: &[StepPlan], execution: Execution) -> Result<Vec<StepSimOutcome>, ChannelError> {
    map_collect(plans, execution, simulate_step).into_iter().collect()
}
