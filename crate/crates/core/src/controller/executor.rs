//! Runs a scenario step by step: publish configs, collect acks, arm every
//! active agent and the collector with one start time, wait for the step to
//! end, gather every report, then move on.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;
use tracing::{info, warn};

use super::record::{
    CompletionAnnotation, EventEntry, RunEvent, RunMetadata, RunRecord, RunStatus, StepRecord, StepStatus,
};
use super::registry::Registry;
use super::scenario::{PlannedStep, Scenario, ScenarioError};
use super::testbed::{Testbed, TestbedError};
use crate::control::{config_hash, topic, Body, Command, ConfigMessage, Envelope, MsgIds, PeerSpec};
use crate::dataplane::FlowKey;
use crate::metrics::FlowReport;
use crate::sim::pair_reports;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecutorConfig {
    pub ack_timeout_ns: u64,
    /// Gap between the arm command and the common start time.
    pub arm_lead_ns: u64,
    /// How long after stop to wait for reports.
    pub result_grace_ns: u64,
    /// How long to wait for referenced agents to show up before the run.
    pub registration_timeout_ns: u64,
    /// Longest single wait, so abort requests are noticed promptly.
    pub poll_slice_ns: u64,
}

impl ExecutorConfig {
    pub fn virtual_time() -> Self {
        ExecutorConfig {
            ack_timeout_ns: 2_000_000_000,
            arm_lead_ns: 0,
            result_grace_ns: 5_000_000_000,
            registration_timeout_ns: 5_000_000_000,
            poll_slice_ns: 1_000_000_000,
        }
    }

    pub fn real_time() -> Self {
        ExecutorConfig {
            arm_lead_ns: 250_000_000,
            poll_slice_ns: 100_000_000,
            ..ExecutorConfig::virtual_time()
        }
    }
}

#[derive(Debug, Error)]
pub enum ExecuteError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("devices not reachable: {}", .0.join(", "))]
    Unreachable(Vec<String>),
    #[error(transparent)]
    Testbed(#[from] TestbedError),
}

/// Everything about a run that does not come from the scenario.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub run_id: String,
    pub created_at_ms: u64,
    pub abort: Arc<AtomicBool>,
    /// Receives run events (and live windows) on `sting/run/<id>/events`.
    pub events: Option<crate::control::Bus>,
    pub seed_override: Option<u64>,
    pub config: ExecutorConfig,
}

impl RunOptions {
    pub fn new(run_id: impl Into<String>, config: ExecutorConfig) -> Self {
        RunOptions {
            run_id: run_id.into(),
            created_at_ms: 0,
            abort: Arc::new(AtomicBool::new(false)),
            events: None,
            seed_override: None,
            config,
        }
    }
}

struct Exec<'a> {
    tb: &'a mut dyn Testbed,
    registry: &'a Mutex<Registry>,
    opts: &'a RunOptions,
    ids: MsgIds,
    events: Vec<EventEntry>,
    event_topic: String,
    lost: BTreeSet<String>,
    aborted: bool,
}

#[derive(Default)]
struct StepInbox {
    acks: BTreeMap<String, Result<String, String>>,
    agent_reports: BTreeMap<FlowKey, FlowReport>,
    collector_reports: Option<BTreeMap<FlowKey, FlowReport>>,
    partial: bool,
}

impl Exec<'_> {
    fn now(&self) -> u64 {
        self.tb.now_ns()
    }

    fn event(&mut self, event: RunEvent) {
        let entry = EventEntry {
            t_ns: self.now(),
            event,
        };
        self.broadcast(&entry);
        self.events.push(entry);
    }

    fn broadcast(&self, entry: &EventEntry) {
        if let Some(bus) = &self.opts.events {
            bus.publish(&Envelope::new(
                self.event_topic.clone(),
                self.ids.next_id(),
                entry.t_ns,
                Body::Event(entry.clone()),
            ));
        }
    }

    fn send(&mut self, topic: String, body: Body) -> Result<String, TestbedError> {
        let msg_id = self.ids.next_id();
        let env = Envelope::new(topic, msg_id.clone(), self.now(), body);
        self.tb.publish(env)?;
        Ok(msg_id)
    }

    fn abort_requested(&self) -> bool {
        self.opts.abort.load(Ordering::SeqCst)
    }

    /// Polls once (bounded by the slice) and routes what arrives.
    fn pump(&mut self, deadline: u64, step: Option<(&PlannedStep, &mut StepInbox)>) -> Result<(), TestbedError> {
        let until = deadline.min(self.now().saturating_add(self.opts.config.poll_slice_ns));
        let batch = self.tb.poll(until)?;
        let now = self.now();
        let mut step = step;
        for env in batch {
            match env.body {
                Body::Status(status) => {
                    self.registry.lock().expect("registry lock").register(&status, now);
                }
                Body::ConfigAck(ack) => {
                    if let Some((plan, inbox)) = step.as_mut() {
                        if ack.run_id == self.opts.run_id && ack.step_index == plan.step_index {
                            let verdict = match (ack.ok, ack.config_hash) {
                                (true, Some(h)) => Ok(h),
                                (true, None) => Err("ack without config hash".into()),
                                (false, _) => Err(ack.reason.unwrap_or_else(|| "rejected".into())),
                            };
                            inbox.acks.insert(ack.device_id, verdict);
                        }
                    }
                }
                Body::Results(r) => {
                    let Some((plan, inbox)) = step.as_mut() else { continue };
                    if r.run_id != self.opts.run_id || r.step_index != plan.step_index {
                        continue;
                    }
                    inbox.partial |= r.partial;
                    let key = FlowKey::new(r.device_id.clone(), r.flow_id);
                    match inbox.agent_reports.entry(key) {
                        std::collections::btree_map::Entry::Occupied(_) => self.event(RunEvent::DuplicateResults {
                            step_index: r.step_index,
                            device_id: r.device_id,
                            flow_id: r.flow_id,
                        }),
                        std::collections::btree_map::Entry::Vacant(slot) => {
                            slot.insert(r.report);
                            self.event(RunEvent::ResultsReceived {
                                step_index: r.step_index,
                                device_id: r.device_id,
                                flow_id: r.flow_id,
                            });
                        }
                    }
                }
                Body::CollectorResults(c) => {
                    let Some((plan, inbox)) = step.as_mut() else { continue };
                    if c.run_id == self.opts.run_id && c.step_index == plan.step_index && inbox.collector_reports.is_none()
                    {
                        inbox.partial |= c.partial;
                        inbox.collector_reports = Some(
                            c.reports
                                .into_iter()
                                .map(|r| (FlowKey::new(r.device_id, r.flow_id), r.report))
                                .collect(),
                        );
                    }
                }
                Body::CollectorWindow(w) if w.run_id == self.opts.run_id => {
                    self.broadcast(&EventEntry {
                        t_ns: now,
                        event: RunEvent::Window {
                            step_index: w.step_index,
                            window: w.window,
                        },
                    });
                }
                _ => {}
            }
        }
        let newly_lost = self.registry.lock().expect("registry lock").refresh(now);
        for device_id in newly_lost {
            self.event(RunEvent::HeartbeatLost {
                device_id: device_id.clone(),
            });
            if let Some((plan, _)) = step.as_ref() {
                if plan.active_devices.contains(&device_id) {
                    self.event(RunEvent::AgentLost {
                        step_index: plan.step_index,
                        device_id: device_id.clone(),
                    });
                    self.lost.insert(device_id);
                }
            }
        }
        if !self.aborted && self.abort_requested() {
            self.aborted = true;
            self.event(RunEvent::AbortRequested);
        }
        Ok(())
    }

    fn await_registration(&mut self, devices: &BTreeSet<String>) -> Result<(), ExecuteError> {
        let deadline = self.now() + self.opts.config.registration_timeout_ns;
        loop {
            let missing: Vec<String> = {
                let reg = self.registry.lock().expect("registry lock");
                devices.iter().filter(|d| !reg.is_reachable(d)).cloned().collect()
            };
            if missing.is_empty() {
                return Ok(());
            }
            if self.now() >= deadline || self.abort_requested() {
                return Err(ExecuteError::Unreachable(missing));
            }
            self.pump(deadline, None)?;
        }
    }

    fn run_step(&mut self, plan: &PlannedStep, scenario: &Scenario) -> Result<StepRecord, TestbedError> {
        let mut inbox = StepInbox::default();
        let mut record = StepRecord {
            step_index: plan.step_index,
            template_index: plan.template_index,
            repetition: plan.repetition,
            label: plan.label.clone(),
            tracked: plan.tracked,
            interferer_count: plan.interferer_count,
            active_devices: plan.active_devices.clone(),
            start_ns: 0,
            stop_ns: 0,
            status: StepStatus::Completed,
            offered_load_bps: plan.offered_load_bps(),
            config_hashes: BTreeMap::new(),
            flows: Vec::new(),
        };
        let collector_addr = self.tb.collector_addr();
        let expected_hashes: BTreeMap<String, String> =
            plan.profiles.iter().map(|p| (p.device_id.clone(), config_hash(p))).collect();

        for profile in &plan.profiles {
            let msg_id = self.send(
                topic::agent_config(&profile.device_id),
                Body::Config(ConfigMessage {
                    run_id: self.opts.run_id.clone(),
                    step_index: plan.step_index,
                    profile: profile.clone(),
                    collector_addr: collector_addr.clone(),
                    window_ns: scenario.window_ns(),
                    clocks_synchronized: scenario.clocks_synchronized,
                }),
            )?;
            self.event(RunEvent::ConfigPublished {
                step_index: plan.step_index,
                device_id: profile.device_id.clone(),
                msg_id,
            });
        }

        let ack_deadline = self.now() + self.opts.config.ack_timeout_ns;
        while inbox.acks.len() < plan.profiles.len() && self.now() < ack_deadline && !self.aborted {
            self.pump(ack_deadline, Some((plan, &mut inbox)))?;
        }
        let mut failure = None;
        for (device, verdict) in std::mem::take(&mut inbox.acks) {
            match verdict {
                Ok(hash) if expected_hashes.get(&device) == Some(&hash) => {
                    self.event(RunEvent::ConfigAcked {
                        step_index: plan.step_index,
                        device_id: device.clone(),
                        config_hash: hash.clone(),
                    });
                    record.config_hashes.insert(device, hash);
                }
                Ok(hash) => {
                    let reason = format!("config hash mismatch ({hash})");
                    self.event(RunEvent::ConfigRejected {
                        step_index: plan.step_index,
                        device_id: device.clone(),
                        reason: reason.clone(),
                    });
                    failure = Some(format!("{device}: {reason}"));
                }
                Err(reason) => {
                    self.event(RunEvent::ConfigRejected {
                        step_index: plan.step_index,
                        device_id: device.clone(),
                        reason: reason.clone(),
                    });
                    failure = Some(format!("{device}: {reason}"));
                }
            }
        }
        let unacked: Vec<String> = plan
            .active_devices
            .iter()
            .filter(|d| !record.config_hashes.contains_key(*d))
            .cloned()
            .collect();
        let silent: Vec<String> = unacked
            .iter()
            .filter(|d| !self.events.iter().any(|e| matches!(&e.event, RunEvent::ConfigRejected { step_index, device_id, .. } if *step_index == plan.step_index && device_id == *d)))
            .cloned()
            .collect();
        if !silent.is_empty() {
            self.event(RunEvent::AckTimeout {
                step_index: plan.step_index,
                devices: silent.clone(),
            });
            failure.get_or_insert_with(|| format!("no ack from {}", silent.join(", ")));
        }
        if self.aborted || failure.is_some() {
            for device in record.config_hashes.keys().cloned().collect::<Vec<_>>() {
                self.send(
                    topic::agent_command(&device),
                    Body::Command(Command::Abort {
                        run_id: self.opts.run_id.clone(),
                    }),
                )?;
            }
            record.status = if self.aborted {
                StepStatus::Aborted
            } else {
                StepStatus::Failed {
                    reason: failure.unwrap_or_default(),
                }
            };
            record.start_ns = self.now();
            record.stop_ns = self.now();
            self.event(RunEvent::StepFinished {
                step_index: plan.step_index,
                status: record.status.clone(),
            });
            return Ok(record);
        }

        let start_ns = self.now() + self.opts.config.arm_lead_ns;
        let stop_ns = start_ns + plan.duration_ns;
        record.start_ns = start_ns;
        record.stop_ns = stop_ns;
        let peers = {
            let reg = self.registry.lock().expect("registry lock");
            plan.profiles
                .iter()
                .map(|p| PeerSpec {
                    device_id: p.device_id.clone(),
                    data_addr: reg
                        .get(&p.device_id)
                        .map_or_else(|| p.device_id.clone(), |e| e.data_addr.clone()),
                    profile: p.clone(),
                })
                .collect()
        };
        self.send(
            topic::COLLECTOR_COMMAND.to_string(),
            Body::Command(Command::ArmCollector {
                run_id: self.opts.run_id.clone(),
                step_index: plan.step_index,
                start_ns,
                stop_ns,
                window_ns: scenario.window_ns(),
                peers,
                clocks_synchronized: scenario.clocks_synchronized,
            }),
        )?;
        for device in &plan.active_devices {
            self.send(
                topic::agent_command(device),
                Body::Command(Command::Arm {
                    run_id: self.opts.run_id.clone(),
                    step_index: plan.step_index,
                    start_ns,
                    stop_ns,
                }),
            )?;
        }
        self.event(RunEvent::StepStarted {
            step_index: plan.step_index,
            interferer_count: plan.interferer_count,
            start_ns,
            stop_ns,
        });
        info!(run_id = %self.opts.run_id, step = plan.step_index, interferers = plan.interferer_count, "step armed");

        let expected: BTreeSet<FlowKey> = plan
            .profiles
            .iter()
            .flat_map(|p| p.flows.iter().map(|f| FlowKey::new(p.device_id.clone(), f.flow_id)))
            .collect();
        let mut deadline = stop_ns + self.opts.config.result_grace_ns;
        let mut abort_sent = false;
        loop {
            let complete = inbox.collector_reports.is_some()
                && expected
                    .iter()
                    .all(|k| inbox.agent_reports.contains_key(k) || self.lost.contains(&k.device_id));
            if complete || self.now() >= deadline {
                break;
            }
            if self.aborted && !abort_sent {
                abort_sent = true;
                let abort = Command::Abort {
                    run_id: self.opts.run_id.clone(),
                };
                self.send(topic::COLLECTOR_COMMAND.to_string(), Body::Command(abort.clone()))?;
                for device in &plan.active_devices {
                    self.send(topic::agent_command(device), Body::Command(abort.clone()))?;
                }
                deadline = deadline.min(self.now() + self.opts.config.result_grace_ns);
            }
            self.pump(deadline, Some((plan, &mut inbox)))?;
        }

        let mut missing = Vec::new();
        for key in &expected {
            if !inbox.agent_reports.contains_key(key) {
                self.event(RunEvent::MissingResults {
                    step_index: plan.step_index,
                    device_id: key.device_id.clone(),
                    flow_id: key.flow_id,
                });
                missing.push(format!("{}/{}", key.device_id, key.flow_id));
            }
        }
        let collector = inbox.collector_reports.take().unwrap_or_default();
        record.flows = pair_reports(&plan.profiles, &inbox.agent_reports, &collector);
        record.status = if self.aborted {
            StepStatus::Aborted
        } else if !missing.is_empty() {
            StepStatus::Failed {
                reason: format!("missing results: {}", missing.join(", ")),
            }
        } else if collector.is_empty() && !expected.is_empty() {
            StepStatus::Failed {
                reason: "missing collector results".into(),
            }
        } else if inbox.partial {
            StepStatus::Failed {
                reason: "partial results".into(),
            }
        } else {
            StepStatus::Completed
        };
        self.event(RunEvent::StepFinished {
            step_index: plan.step_index,
            status: record.status.clone(),
        });
        Ok(record)
    }
}

/// Executes `scenario` on `testbed`. Fails before any traffic when the
/// scenario is invalid or a referenced agent is not reachable.
pub fn execute_scenario(
    testbed: &mut dyn Testbed,
    scenario: &Scenario,
    registry: &Mutex<Registry>,
    opts: &RunOptions,
) -> Result<RunRecord, ExecuteError> {
    scenario.validate()?;
    let plan = scenario.expand();
    let mut exec = Exec {
        tb: testbed,
        registry,
        opts,
        ids: MsgIds::new(format!("ctl-{}", opts.run_id)),
        events: Vec::new(),
        event_topic: topic::run_events(&opts.run_id),
        lost: BTreeSet::new(),
        aborted: false,
    };
    exec.await_registration(&scenario.referenced_devices())?;
    exec.event(RunEvent::RunStarted {
        run_id: opts.run_id.clone(),
        scenario_id: scenario.scenario_id.clone(),
        steps: plan.len(),
    });
    let mut steps = Vec::with_capacity(plan.len());
    for planned in &plan {
        if exec.aborted {
            break;
        }
        let step = exec.run_step(planned, scenario)?;
        if !matches!(step.status, StepStatus::Completed) {
            warn!(run_id = %opts.run_id, step = step.step_index, status = ?step.status, "step did not complete");
        }
        steps.push(step);
    }
    let status = if exec.aborted {
        RunStatus::Aborted
    } else if !exec.lost.is_empty() || steps.iter().any(|s| s.status != StepStatus::Completed) {
        RunStatus::Partial
    } else {
        RunStatus::Completed
    };
    exec.event(RunEvent::RunFinished { status });
    Ok(RunRecord {
        run_id: opts.run_id.clone(),
        created_at_ms: opts.created_at_ms,
        scenario: scenario.clone(),
        status,
        metadata: RunMetadata {
            transport: exec.tb.transport_name(),
            virtual_time: exec.tb.virtual_time(),
            max_aggregate_offered_bps: plan.iter().map(PlannedStep::offered_load_bps).fold(0.0, f64::max),
            seed_override: opts.seed_override,
        },
        steps,
        events: exec.events,
        annotations: Vec::<CompletionAnnotation>::new(),
    })
}
