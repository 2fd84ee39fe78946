//! Control-plane vocabulary: MQTT-style topics, message envelopes and an
//! in-process topic bus.
//!
//! Topic grammar:
//!
//! ```text
//! sting/agents/<device_id>/config    controller -> agent   Config
//! sting/agents/<device_id>/command   controller -> agent   Command
//! sting/agents/<device_id>/status    agent -> controller   Status, ConfigAck
//! sting/agents/<device_id>/results   agent -> controller   Results
//! sting/collector/command            controller -> collector
//! sting/collector/results            collector -> controller
//! sting/run/<run_id>/events          controller -> observers
//! ```

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::record::EventEntry;
use crate::dataplane::WindowEvent;
use crate::metrics::FlowReport;
use crate::traffic::DeviceTrafficProfile;

pub const CONTROL_SCHEMA_VERSION: u32 = 1;

pub mod topic {
    pub fn agent_config(device_id: &str) -> String {
        format!("sting/agents/{device_id}/config")
    }
    pub fn agent_command(device_id: &str) -> String {
        format!("sting/agents/{device_id}/command")
    }
    pub fn agent_status(device_id: &str) -> String {
        format!("sting/agents/{device_id}/status")
    }
    pub fn agent_results(device_id: &str) -> String {
        format!("sting/agents/{device_id}/results")
    }
    pub fn run_events(run_id: &str) -> String {
        format!("sting/run/{run_id}/events")
    }
    pub const COLLECTOR_COMMAND: &str = "sting/collector/command";
    pub const COLLECTOR_RESULTS: &str = "sting/collector/results";
    /// Everything agents publish upward.
    pub const ALL_AGENT_STATUS: &str = "sting/agents/+/status";
    pub const ALL_AGENT_RESULTS: &str = "sting/agents/+/results";

    /// Device id in `sting/agents/<id>/...`.
    pub fn device_of(topic: &str) -> Option<&str> {
        let mut it = topic.split('/');
        match (it.next(), it.next(), it.next()) {
            (Some("sting"), Some("agents"), Some(id)) if !id.is_empty() => Some(id),
            _ => None,
        }
    }

    /// MQTT filter matching: `+` matches one level, a trailing `#` matches the
    /// remainder including the parent level.
    pub fn matches(filter: &str, topic: &str) -> bool {
        let mut f = filter.split('/');
        let mut t = topic.split('/');
        loop {
            match (f.next(), t.next()) {
                (Some("#"), _) => return f.next().is_none(),
                (Some("+"), Some(_)) => {}
                (Some(a), Some(b)) if a == b => {}
                (None, None) => return true,
                _ => return false,
            }
        }
    }
}

/// Hex SHA-256 of the canonical JSON of a profile. Agents ack with it and the
/// run record stores it.
pub fn config_hash(profile: &DeviceTrafficProfile) -> String {
    let canonical = serde_json::to_vec(profile).expect("profile serializes");
    hex::encode(Sha256::digest(canonical))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Idle,
    Configured,
    Running,
    Reporting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigMessage {
    pub run_id: String,
    pub step_index: usize,
    pub profile: DeviceTrafficProfile,
    /// Data-plane address of the collector this step.
    pub collector_addr: String,
    pub window_ns: u64,
    #[serde(default)]
    pub clocks_synchronized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigAck {
    pub run_id: String,
    pub step_index: usize,
    pub device_id: String,
    /// msg_id of the acknowledged config.
    pub config_msg_id: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerSpec {
    pub device_id: String,
    pub data_addr: String,
    pub profile: DeviceTrafficProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    Arm {
        run_id: String,
        step_index: usize,
        start_ns: u64,
        stop_ns: u64,
    },
    Abort {
        run_id: String,
    },
    /// Collector only: receive from and echo to these peers during the step.
    ArmCollector {
        run_id: String,
        step_index: usize,
        start_ns: u64,
        stop_ns: u64,
        window_ns: u64,
        peers: Vec<PeerSpec>,
        #[serde(default)]
        clocks_synchronized: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusMessage {
    pub device_id: String,
    pub lifecycle: Lifecycle,
    pub clock_ns: u64,
    pub active_flows: usize,
    /// Where the agent receives data-plane traffic.
    pub data_addr: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsMessage {
    pub run_id: String,
    pub step_index: usize,
    pub device_id: String,
    pub flow_id: u16,
    pub report: FlowReport,
    /// The step ended early (abort or transport failure); the report is partial.
    #[serde(default)]
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectorFlowReport {
    pub device_id: String,
    pub flow_id: u16,
    pub report: FlowReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectorResults {
    pub run_id: String,
    pub step_index: usize,
    pub reports: Vec<CollectorFlowReport>,
    #[serde(default)]
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectorWindow {
    pub run_id: String,
    pub step_index: usize,
    pub window: WindowEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "snake_case")]
// Envelopes are built once per message and moved, never stored in bulk.
#[allow(clippy::large_enum_variant)]
pub enum Body {
    Config(ConfigMessage),
    ConfigAck(ConfigAck),
    Command(Command),
    Status(StatusMessage),
    Results(ResultsMessage),
    CollectorResults(CollectorResults),
    CollectorWindow(CollectorWindow),
    Event(EventEntry),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub schema_version: u32,
    pub msg_id: String,
    pub sent_ns: u64,
    pub topic: String,
    pub body: Body,
}

impl Envelope {
    pub fn new(topic: impl Into<String>, msg_id: impl Into<String>, sent_ns: u64, body: Body) -> Self {
        Envelope {
            schema_version: CONTROL_SCHEMA_VERSION,
            msg_id: msg_id.into(),
            sent_ns,
            topic: topic.into(),
            body,
        }
    }
}

/// Generates unique message ids with a fixed prefix.
#[derive(Debug)]
pub struct MsgIds {
    prefix: String,
    next: AtomicU64,
}

impl MsgIds {
    pub fn new(prefix: impl Into<String>) -> Self {
        MsgIds {
            prefix: prefix.into(),
            next: AtomicU64::new(0),
        }
    }

    pub fn next_id(&self) -> String {
        format!("{}-{}", self.prefix, self.next.fetch_add(1, Ordering::Relaxed))
    }
}

/// Remembers recently handled msg_ids so redelivered commands are no-ops.
#[derive(Debug, Default)]
pub struct Dedupe {
    seen: std::collections::HashSet<String>,
    order: std::collections::VecDeque<String>,
}

impl Dedupe {
    const CAPACITY: usize = 4096;

    /// True the first time `msg_id` is offered.
    pub fn first_time(&mut self, msg_id: &str) -> bool {
        if self.seen.contains(msg_id) {
            return false;
        }
        if self.order.len() == Self::CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        self.seen.insert(msg_id.to_string());
        self.order.push_back(msg_id.to_string());
        true
    }
}

pub type SubscriptionId = u64;

type Callback = Arc<dyn Fn(&Envelope) + Send + Sync>;

#[derive(Clone)]
enum Sink {
    Channel(mpsc::Sender<Envelope>),
    Callback(Callback),
}

#[derive(Default)]
struct BusInner {
    next_id: SubscriptionId,
    subs: HashMap<SubscriptionId, (String, Sink)>,
}

/// Thread-safe in-process pub/sub with MQTT filter semantics. Delivery order
/// per subscriber follows publish order from any single thread.
#[derive(Clone, Default)]
pub struct Bus {
    inner: Arc<Mutex<BusInner>>,
}

impl std::fmt::Debug for Bus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.inner.lock().map(|i| i.subs.len()).unwrap_or(0);
        f.debug_struct("Bus").field("subscriptions", &n).finish()
    }
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    fn add(&self, filter: &str, sink: Sink) -> SubscriptionId {
        let mut inner = self.inner.lock().expect("bus lock");
        inner.next_id += 1;
        let id = inner.next_id;
        inner.subs.insert(id, (filter.to_string(), sink));
        id
    }

    pub fn subscribe(&self, filter: &str) -> (SubscriptionId, mpsc::Receiver<Envelope>) {
        let (tx, rx) = mpsc::channel();
        (self.add(filter, Sink::Channel(tx)), rx)
    }

    /// `f` runs on the publishing thread and must not block.
    pub fn subscribe_fn(&self, filter: &str, f: impl Fn(&Envelope) + Send + Sync + 'static) -> SubscriptionId {
        self.add(filter, Sink::Callback(Arc::new(f)))
    }

    pub fn unsubscribe(&self, id: SubscriptionId) {
        self.inner.lock().expect("bus lock").subs.remove(&id);
    }

    /// Delivers to every matching subscriber; returns how many received it.
    /// Subscribers whose receiver was dropped are removed.
    pub fn publish(&self, env: &Envelope) -> usize {
        let targets: Vec<(SubscriptionId, Sink)> = {
            let inner = self.inner.lock().expect("bus lock");
            inner
                .subs
                .iter()
                .filter(|(_, (f, _))| topic::matches(f, &env.topic))
                .map(|(id, (_, s))| (*id, s.clone()))
                .collect()
        };
        let mut delivered = 0;
        let mut dead = Vec::new();
        for (id, sink) in targets {
            match sink {
                Sink::Channel(tx) => {
                    if tx.send(env.clone()).is_ok() {
                        delivered += 1;
                    } else {
                        dead.push(id);
                    }
                }
                Sink::Callback(f) => {
                    f(env);
                    delivered += 1;
                }
            }
        }
        if !dead.is_empty() {
            let mut inner = self.inner.lock().expect("bus lock");
            for id in dead {
                inner.subs.remove(&id);
            }
        }
        delivered
    }
}
