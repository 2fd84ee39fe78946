//! Device registry fed by agent heartbeats.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::DEFAULT_HEARTBEAT_NS;
use crate::control::{Lifecycle, StatusMessage};

/// Heartbeats that may be missed before an agent counts as unreachable.
pub const MISSED_HEARTBEATS: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reachability {
    Reachable,
    Unreachable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegistryUpdate {
    Registered,
    Refreshed,
    /// Was unreachable, heard from again.
    Recovered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEntry {
    pub device_id: String,
    pub data_addr: String,
    pub lifecycle: Lifecycle,
    pub active_flows: usize,
    pub version: String,
    pub first_seen_ns: u64,
    pub last_seen_ns: u64,
    pub reachability: Reachability,
}

#[derive(Debug, Clone)]
pub struct Registry {
    heartbeat_ns: u64,
    agents: BTreeMap<String, AgentEntry>,
}

impl Default for Registry {
    fn default() -> Self {
        Registry::new(DEFAULT_HEARTBEAT_NS)
    }
}

impl Registry {
    pub fn new(heartbeat_ns: u64) -> Self {
        Registry {
            heartbeat_ns,
            agents: BTreeMap::new(),
        }
    }

    pub fn timeout_ns(&self) -> u64 {
        MISSED_HEARTBEATS * self.heartbeat_ns
    }

    pub fn register(&mut self, status: &StatusMessage, now_ns: u64) -> RegistryUpdate {
        match self.agents.get_mut(&status.device_id) {
            Some(e) => {
                let recovered = e.reachability == Reachability::Unreachable;
                e.data_addr = status.data_addr.clone();
                e.lifecycle = status.lifecycle;
                e.active_flows = status.active_flows;
                e.version = status.version.clone();
                e.last_seen_ns = e.last_seen_ns.max(now_ns);
                e.reachability = Reachability::Reachable;
                if recovered {
                    RegistryUpdate::Recovered
                } else {
                    RegistryUpdate::Refreshed
                }
            }
            None => {
                self.agents.insert(
                    status.device_id.clone(),
                    AgentEntry {
                        device_id: status.device_id.clone(),
                        data_addr: status.data_addr.clone(),
                        lifecycle: status.lifecycle,
                        active_flows: status.active_flows,
                        version: status.version.clone(),
                        first_seen_ns: now_ns,
                        last_seen_ns: now_ns,
                        reachability: Reachability::Reachable,
                    },
                );
                RegistryUpdate::Registered
            }
        }
    }

    /// Marks agents silent for longer than the timeout; returns the ones that
    /// just became unreachable.
    pub fn refresh(&mut self, now_ns: u64) -> Vec<String> {
        let timeout = self.timeout_ns();
        let mut lost = Vec::new();
        for e in self.agents.values_mut() {
            if e.reachability == Reachability::Reachable && now_ns.saturating_sub(e.last_seen_ns) > timeout {
                e.reachability = Reachability::Unreachable;
                lost.push(e.device_id.clone());
            }
        }
        lost
    }

    pub fn get(&self, device_id: &str) -> Option<&AgentEntry> {
        self.agents.get(device_id)
    }

    pub fn is_reachable(&self, device_id: &str) -> bool {
        self.get(device_id).is_some_and(|e| e.reachability == Reachability::Reachable)
    }

    pub fn list(&self) -> Vec<AgentEntry> {
        self.agents.values().cloned().collect()
    }
}
