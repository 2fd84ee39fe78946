//! Sans-IO agent state machine.
//!
//! Lifecycle: `Idle -> Configured -> Running -> Reporting -> Idle`. The
//! driver feeds control envelopes to [`Agent::handle`], calls
//! [`Agent::tick`] no later than [`Agent::next_wakeup_ns`], and moves
//! data-plane packets through [`Agent::data_plane_mut`]. Reports stay local
//! until the step stops; each (run, step, flow) is published once.

use std::collections::HashSet;
use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

use thiserror::Error;
use tracing::{debug, warn};

use crate::control::{
    config_hash, topic, Body, Command, ConfigAck, ConfigMessage, Dedupe, Envelope, Lifecycle, MsgIds, ResultsMessage,
    StatusMessage,
};
use crate::dataplane::Node;
use crate::traffic::{DeviceTrafficProfile, ProfileError};

pub const DEFAULT_HEARTBEAT_NS: u64 = 1_000_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("invalid profile: {0}")]
    InvalidProfile(#[from] ProfileError),
    #[error("agent is busy running a step")]
    BusyRunning,
    #[error("profile is for device {0}")]
    WrongDevice(String),
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub device_id: String,
    /// Address peers use to reach this agent's data plane.
    pub data_addr: String,
    pub heartbeat_ns: u64,
    /// Replaces every flow seed (from `STING_SEED`).
    pub seed_override: Option<u64>,
    /// Append-only JSON-lines copy of every published result.
    pub spool: Option<PathBuf>,
}

impl AgentConfig {
    pub fn new(device_id: impl Into<String>, data_addr: impl Into<String>) -> Self {
        AgentConfig {
            device_id: device_id.into(),
            data_addr: data_addr.into(),
            heartbeat_ns: DEFAULT_HEARTBEAT_NS,
            seed_override: None,
            spool: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Staged {
    run_id: String,
    step_index: usize,
    profile: DeviceTrafficProfile,
    collector_addr: String,
    window_ns: u64,
    clocks_synchronized: bool,
}

#[derive(Debug)]
struct Active {
    run_id: String,
    step_index: usize,
    stop_ns: u64,
    node: Node,
}

#[derive(Debug)]
pub struct Agent {
    cfg: AgentConfig,
    lifecycle: Lifecycle,
    staged: Option<Staged>,
    active: Option<Active>,
    next_heartbeat_ns: u64,
    dedupe: Dedupe,
    ids: MsgIds,
    published: HashSet<(String, usize)>,
    spool: Option<File>,
}

impl Agent {
    pub fn new(cfg: AgentConfig, now_ns: u64) -> std::io::Result<Agent> {
        let spool = match &cfg.spool {
            Some(path) => Some(File::options().create(true).append(true).open(path)?),
            None => None,
        };
        Ok(Agent {
            ids: MsgIds::new(cfg.device_id.clone()),
            cfg,
            lifecycle: Lifecycle::Idle,
            staged: None,
            active: None,
            next_heartbeat_ns: now_ns,
            dedupe: Dedupe::default(),
            published: HashSet::new(),
            spool,
        })
    }

    pub fn device_id(&self) -> &str {
        &self.cfg.device_id
    }

    pub fn lifecycle(&self) -> Lifecycle {
        self.lifecycle
    }

    pub fn data_plane(&self) -> Option<&Node> {
        self.active.as_ref().map(|a| &a.node)
    }

    pub fn data_plane_mut(&mut self) -> Option<&mut Node> {
        self.active.as_mut().map(|a| &mut a.node)
    }

    pub fn active_flows(&self) -> usize {
        match self.lifecycle {
            Lifecycle::Running => self.staged.as_ref().map_or(0, |s| s.profile.flows.len()),
            _ => 0,
        }
    }

    /// Validates and stages a profile; returns its config hash.
    pub fn apply_config(&mut self, profile: &DeviceTrafficProfile) -> Result<String, AgentError> {
        self.stage(profile, String::new(), 0, String::new(), crate::metrics::DEFAULT_WINDOW_NS)
    }

    fn stage(
        &mut self,
        profile: &DeviceTrafficProfile,
        run_id: String,
        step_index: usize,
        collector_addr: String,
        window_ns: u64,
    ) -> Result<String, AgentError> {
        if matches!(self.lifecycle, Lifecycle::Running | Lifecycle::Reporting) {
            return Err(AgentError::BusyRunning);
        }
        if profile.device_id != self.cfg.device_id {
            return Err(AgentError::WrongDevice(profile.device_id.clone()));
        }
        profile.validate()?;
        let hash = config_hash(profile);
        let mut local = profile.clone();
        if let Some(seed) = self.cfg.seed_override {
            local.override_seeds(seed);
        }
        self.staged = Some(Staged {
            run_id,
            step_index,
            profile: local,
            collector_addr,
            window_ns,
            clocks_synchronized: false,
        });
        self.lifecycle = Lifecycle::Configured;
        Ok(hash)
    }

    /// Starts the staged profile between `start_ns` and `stop_ns`.
    pub fn arm(&mut self, run_id: &str, step_index: usize, start_ns: u64, stop_ns: u64) -> bool {
        let Some(staged) = &self.staged else { return false };
        if self.lifecycle != Lifecycle::Configured || staged.run_id != run_id || staged.step_index != step_index {
            return false;
        }
        let mut node = Node::with_window_for_agent(
            &staged.profile,
            &self.cfg.data_addr,
            &staged.collector_addr,
            start_ns,
            stop_ns,
            staged.window_ns,
        );
        node.set_clocks_synchronized(staged.clocks_synchronized);
        self.active = Some(Active {
            run_id: run_id.to_string(),
            step_index,
            stop_ns,
            node,
        });
        self.lifecycle = Lifecycle::Running;
        true
    }

    fn envelope(&self, topic: String, now_ns: u64, body: Body) -> Envelope {
        Envelope::new(topic, self.ids.next_id(), now_ns, body)
    }

    pub fn heartbeat(&self, now_ns: u64) -> StatusMessage {
        StatusMessage {
            device_id: self.cfg.device_id.clone(),
            lifecycle: self.lifecycle,
            clock_ns: now_ns,
            active_flows: self.active_flows(),
            data_addr: self.cfg.data_addr.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    fn status_envelope(&self, now_ns: u64) -> Envelope {
        self.envelope(topic::agent_status(&self.cfg.device_id), now_ns, Body::Status(self.heartbeat(now_ns)))
    }

    pub fn handle(&mut self, env: &Envelope, now_ns: u64) -> Vec<Envelope> {
        if !self.dedupe.first_time(&env.msg_id) {
            debug!(msg_id = %env.msg_id, "duplicate control message ignored");
            return Vec::new();
        }
        match &env.body {
            Body::Config(cfg) => vec![self.on_config(&env.msg_id, cfg, now_ns)],
            Body::Command(Command::Arm {
                run_id,
                step_index,
                start_ns,
                stop_ns,
            }) => {
                if self.arm(run_id, *step_index, *start_ns, *stop_ns) {
                    vec![self.status_envelope(now_ns)]
                } else {
                    warn!(device = %self.cfg.device_id, run_id, step_index, "arm without matching config ignored");
                    Vec::new()
                }
            }
            Body::Command(Command::Abort { run_id }) => self.abort(run_id, now_ns),
            _ => Vec::new(),
        }
    }

    fn on_config(&mut self, msg_id: &str, cfg: &ConfigMessage, now_ns: u64) -> Envelope {
        let result = self.stage(
            &cfg.profile,
            cfg.run_id.clone(),
            cfg.step_index,
            cfg.collector_addr.clone(),
            cfg.window_ns,
        );
        if let Some(staged) = self.staged.as_mut().filter(|_| result.is_ok()) {
            staged.clocks_synchronized = cfg.clocks_synchronized;
        }
        let ack = ConfigAck {
            run_id: cfg.run_id.clone(),
            step_index: cfg.step_index,
            device_id: self.cfg.device_id.clone(),
            config_msg_id: msg_id.to_string(),
            ok: result.is_ok(),
            config_hash: result.as_ref().ok().cloned(),
            reason: result.err().map(|e| e.to_string()),
        };
        self.envelope(topic::agent_status(&self.cfg.device_id), now_ns, Body::ConfigAck(ack))
    }

    fn abort(&mut self, run_id: &str, now_ns: u64) -> Vec<Envelope> {
        match self.lifecycle {
            Lifecycle::Running if self.active.as_ref().is_some_and(|a| a.run_id == run_id) => {
                self.report(now_ns, true, None)
            }
            Lifecycle::Configured if self.staged.as_ref().is_some_and(|s| s.run_id == run_id) => {
                self.staged = None;
                self.lifecycle = Lifecycle::Idle;
                vec![self.status_envelope(now_ns)]
            }
            _ => Vec::new(),
        }
    }

    /// Ends the step on a transport failure and publishes partial reports.
    pub fn fail(&mut self, now_ns: u64, reason: &str) -> Vec<Envelope> {
        if self.lifecycle == Lifecycle::Running {
            self.report(now_ns, true, Some(reason.to_string()))
        } else {
            Vec::new()
        }
    }

    fn report(&mut self, now_ns: u64, partial: bool, error: Option<String>) -> Vec<Envelope> {
        let Some(active) = self.active.take() else { return Vec::new() };
        self.lifecycle = Lifecycle::Reporting;
        let end = now_ns.clamp(active.node.start_ns(), active.stop_ns.max(active.node.start_ns()));
        let mut out = Vec::new();
        if self.published.insert((active.run_id.clone(), active.step_index)) {
            for (key, report) in active.node.finalize(end) {
                let msg = ResultsMessage {
                    run_id: active.run_id.clone(),
                    step_index: active.step_index,
                    device_id: key.device_id,
                    flow_id: key.flow_id,
                    report,
                    partial,
                    error: error.clone(),
                };
                self.spool_line(&msg);
                out.push(self.envelope(topic::agent_results(&self.cfg.device_id), now_ns, Body::Results(msg)));
            }
        }
        self.staged = None;
        self.lifecycle = Lifecycle::Idle;
        out.push(self.status_envelope(now_ns));
        out
    }

    fn spool_line(&mut self, msg: &ResultsMessage) {
        if let Some(f) = &mut self.spool {
            let line = serde_json::to_string(msg).expect("results serialize");
            if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                warn!(error = %e, "result spool write failed");
            }
        }
    }

    /// Earliest time `tick` has work to do.
    pub fn next_wakeup_ns(&self) -> u64 {
        match &self.active {
            Some(a) => self.next_heartbeat_ns.min(a.stop_ns),
            None => self.next_heartbeat_ns,
        }
    }

    /// Finishes a step whose stop time passed and emits due heartbeats.
    pub fn tick(&mut self, now_ns: u64) -> Vec<Envelope> {
        let mut out = Vec::new();
        if self.active.as_ref().is_some_and(|a| now_ns >= a.stop_ns) {
            out.extend(self.report(now_ns, false, None));
        }
        if now_ns >= self.next_heartbeat_ns {
            if !out.iter().any(|e| matches!(e.body, Body::Status(_))) {
                out.push(self.status_envelope(now_ns));
            }
            let hb = self.cfg.heartbeat_ns.max(1);
            self.next_heartbeat_ns += (now_ns - self.next_heartbeat_ns) / hb * hb + hb;
        }
        out
    }
}
