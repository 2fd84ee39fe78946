//! Persisted outcome of a scenario run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::scenario::Scenario;
use crate::dataplane::WindowEvent;
use crate::metrics::FlowReport;
use crate::traffic::{Direction, FlowKind};

/// Both ends' reports of one (device, flow) pair in one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowOutcome {
    pub device_id: String,
    pub flow_id: u16,
    pub kind: FlowKind,
    pub direction: Direction,
    pub offered_load_bps: f64,
    /// Published by the agent after the step.
    pub agent: Option<FlowReport>,
    /// Produced by the controller-side collector.
    pub collector: Option<FlowReport>,
}

impl FlowOutcome {
    /// Receive-side report: throughput, loss, jitter, frames.
    pub fn receiver(&self) -> Option<&FlowReport> {
        match self.direction {
            Direction::Uplink => self.collector.as_ref(),
            Direction::Downlink => self.agent.as_ref(),
        }
    }

    /// Send-side report: RTT samples and send counters.
    pub fn sender(&self) -> Option<&FlowReport> {
        match self.direction {
            Direction::Uplink => self.agent.as_ref(),
            Direction::Downlink => self.collector.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum StepStatus {
    Completed,
    Failed { reason: String },
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub template_index: usize,
    pub repetition: u32,
    pub label: String,
    pub tracked: bool,
    pub interferer_count: usize,
    pub active_devices: Vec<String>,
    pub start_ns: u64,
    pub stop_ns: u64,
    pub status: StepStatus,
    pub offered_load_bps: f64,
    /// Config hash acknowledged by each device.
    pub config_hashes: BTreeMap<String, String>,
    pub flows: Vec<FlowOutcome>,
}

impl StepRecord {
    pub fn device_flows<'a>(&'a self, device_id: &'a str) -> impl Iterator<Item = &'a FlowOutcome> + 'a {
        self.flows.iter().filter(move |f| f.device_id == device_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Some step failed or an agent was lost.
    Partial,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    RunStarted {
        run_id: String,
        scenario_id: String,
        steps: usize,
    },
    ConfigPublished {
        step_index: usize,
        device_id: String,
        msg_id: String,
    },
    ConfigAcked {
        step_index: usize,
        device_id: String,
        config_hash: String,
    },
    ConfigRejected {
        step_index: usize,
        device_id: String,
        reason: String,
    },
    AckTimeout {
        step_index: usize,
        devices: Vec<String>,
    },
    StepStarted {
        step_index: usize,
        interferer_count: usize,
        start_ns: u64,
        stop_ns: u64,
    },
    StepFinished {
        step_index: usize,
        status: StepStatus,
    },
    ResultsReceived {
        step_index: usize,
        device_id: String,
        flow_id: u16,
    },
    DuplicateResults {
        step_index: usize,
        device_id: String,
        flow_id: u16,
    },
    MissingResults {
        step_index: usize,
        device_id: String,
        flow_id: u16,
    },
    HeartbeatLost {
        device_id: String,
    },
    AgentLost {
        step_index: usize,
        device_id: String,
    },
    AbortRequested,
    /// Live-only: a closed window at the collector. Not kept in the record.
    Window {
        step_index: usize,
        window: WindowEvent,
    },
    RunFinished {
        status: RunStatus,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventEntry {
    pub t_ns: u64,
    #[serde(flatten)]
    pub event: RunEvent,
}

/// Operator completion time of one step, measured by stopwatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionAnnotation {
    pub step_index: usize,
    pub completion_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub transport: String,
    pub virtual_time: bool,
    /// Largest per-step sum of offered loads.
    pub max_aggregate_offered_bps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_override: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    /// Milliseconds since the Unix epoch.
    pub created_at_ms: u64,
    pub scenario: Scenario,
    pub status: RunStatus,
    pub metadata: RunMetadata,
    pub steps: Vec<StepRecord>,
    pub events: Vec<EventEntry>,
    #[serde(default)]
    pub annotations: Vec<CompletionAnnotation>,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn completion_times(&self, step_index: usize) -> impl Iterator<Item = f64> + '_ {
        self.annotations
            .iter()
            .filter(move |a| a.step_index == step_index)
            .map(|a| a.completion_time_s)
    }

    /// Number of steps that take a completion annotation.
    pub fn annotation_slots(&self) -> usize {
        self.steps.iter().filter(|s| s.tracked).count()
    }
}
