//! Versioned scenario schema: ordered steps naming the active devices, their
//! traffic profiles, and how long each step runs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::TransportConfig;
use crate::traffic::{offered_load, DeviceTrafficProfile, ProfileError};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

/// Data-plane address of the controller-side collector on emulated channels.
pub const COLLECTOR_ID: &str = "collector";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(default)]
    pub label: String,
    pub active_devices: Vec<String>,
    pub duration_s: f64,
    #[serde(default = "one")]
    pub repetitions: u32,
    /// Untracked steps (warm-up runs) are executed and recorded but skipped by
    /// analysis.
    #[serde(default = "yes")]
    pub tracked: bool,
    /// Per-step replacements for the scenario-level device profiles.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub profile_overrides: Vec<DeviceTrafficProfile>,
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub scenario_id: String,
    /// Device whose link quality is under test; every other active device
    /// counts as an interferer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sut_device: Option<String>,
    pub devices: Vec<DeviceTrafficProfile>,
    pub steps: Vec<Step>,
    pub transport: TransportConfig,
    #[serde(default = "default_window_s")]
    pub window_s: f64,
    #[serde(default)]
    pub metadata: ScenarioMetadata,
    /// Declares that all agents and the collector share a time base, which
    /// adds one-way delay to the flow reports.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clocks_synchronized: bool,
}

fn default_window_s() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("unsupported scenario schema version {0}")]
    SchemaVersion(u32),
    #[error("scenario has no steps")]
    NoSteps,
    #[error("step {step}: duration must be positive")]
    Duration { step: usize },
    #[error("step {step}: repetitions must be at least 1")]
    Repetitions { step: usize },
    #[error("step {step}: device {device} listed twice")]
    DuplicateActive { step: usize, device: String },
    #[error("device {0} has no profile")]
    UnknownDevice(String),
    #[error("device {0} defined twice")]
    DuplicateDevice(String),
    #[error("device id {0} is reserved or empty")]
    ReservedName(String),
    #[error("device {device}: {source}")]
    Profile {
        device: String,
        #[source]
        source: ProfileError,
    },
    #[error("window_s must be positive")]
    Window,
    #[error("emulated channel needs positive capacity and buffer")]
    Channel,
    #[error("invalid scenario JSON: {0}")]
    Json(String),
}

/// One concrete execution unit: a step template at a given repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedStep {
    pub step_index: usize,
    pub template_index: usize,
    pub repetition: u32,
    pub label: String,
    pub tracked: bool,
    pub active_devices: Vec<String>,
    pub interferer_count: usize,
    pub duration_ns: u64,
    pub profiles: Vec<DeviceTrafficProfile>,
}

impl PlannedStep {
    pub fn offered_load_bps(&self) -> f64 {
        self.profiles.iter().map(offered_load).sum()
    }

    pub fn profile(&self, device_id: &str) -> Option<&DeviceTrafficProfile> {
        self.profiles.iter().find(|p| p.device_id == device_id)
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Json(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn device(&self, device_id: &str) -> Option<&DeviceTrafficProfile> {
        self.devices.iter().find(|d| d.device_id == device_id)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(ScenarioError::SchemaVersion(self.schema_version));
        }
        if self.steps.is_empty() {
            return Err(ScenarioError::NoSteps);
        }
        if !(self.window_s.is_finite() && self.window_s > 0.0) {
            return Err(ScenarioError::Window);
        }
        if let TransportConfig::Emulated(ch) = &self.transport {
            if ch.capacity_bps == 0 || ch.buffer_bytes == 0 {
                return Err(ScenarioError::Channel);
            }
        }
        let check_profile = |p: &DeviceTrafficProfile| {
            if p.device_id.is_empty() || p.device_id == COLLECTOR_ID || p.device_id.contains(['/', '+', '#']) {
                return Err(ScenarioError::ReservedName(p.device_id.clone()));
            }
            p.validate().map_err(|source| ScenarioError::Profile {
                device: p.device_id.clone(),
                source,
            })
        };
        let mut known = BTreeSet::new();
        for p in &self.devices {
            check_profile(p)?;
            if !known.insert(p.device_id.as_str()) {
                return Err(ScenarioError::DuplicateDevice(p.device_id.clone()));
            }
        }
        if let Some(sut) = &self.sut_device {
            if !known.contains(sut.as_str()) {
                return Err(ScenarioError::UnknownDevice(sut.clone()));
            }
        }
        for (i, step) in self.steps.iter().enumerate() {
            if !(step.duration_s.is_finite() && step.duration_s > 0.0) {
                return Err(ScenarioError::Duration { step: i });
            }
            if step.repetitions == 0 {
                return Err(ScenarioError::Repetitions { step: i });
            }
            let mut active = BTreeSet::new();
            for d in &step.active_devices {
                if !active.insert(d.as_str()) {
                    return Err(ScenarioError::DuplicateActive {
                        step: i,
                        device: d.clone(),
                    });
                }
                if !known.contains(d.as_str()) {
                    return Err(ScenarioError::UnknownDevice(d.clone()));
                }
            }
            for p in &step.profile_overrides {
                check_profile(p)?;
                if !known.contains(p.device_id.as_str()) {
                    return Err(ScenarioError::UnknownDevice(p.device_id.clone()));
                }
            }
        }
        Ok(())
    }

    /// Every device referenced by any step.
    pub fn referenced_devices(&self) -> BTreeSet<String> {
        self.steps.iter().flat_map(|s| s.active_devices.iter().cloned()).collect()
    }

    pub fn interferer_count(&self, step: &Step) -> usize {
        step.active_devices
            .iter()
            .filter(|d| Some(d.as_str()) != self.sut_device.as_deref())
            .count()
    }

    /// Steps unrolled by repetition, in execution order.
    pub fn expand(&self) -> Vec<PlannedStep> {
        let mut out = Vec::new();
        for (template_index, step) in self.steps.iter().enumerate() {
            for repetition in 0..step.repetitions {
                let profiles = step
                    .active_devices
                    .iter()
                    .filter_map(|d| {
                        step.profile_overrides
                            .iter()
                            .find(|p| &p.device_id == d)
                            .or_else(|| self.device(d))
                            .cloned()
                    })
                    .collect();
                out.push(PlannedStep {
                    step_index: out.len(),
                    template_index,
                    repetition,
                    label: step.label.clone(),
                    tracked: step.tracked,
                    active_devices: step.active_devices.clone(),
                    interferer_count: self.interferer_count(step),
                    duration_ns: (step.duration_s * 1e9).round() as u64,
                    profiles,
                });
            }
        }
        out
    }

    pub fn window_ns(&self) -> u64 {
        (self.window_s * 1e9).round() as u64
    }
}
