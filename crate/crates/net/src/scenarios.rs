//! Named scenarios kept as one pretty JSON file each.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sting_core::controller::scenario::{Scenario, ScenarioError};
use sting_core::library::reference_scenarios;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioStoreError {
    #[error("scenario id {0:?} must be non-empty and use only letters, digits, '-', '_' or '.'")]
    BadId(String),
    #[error(transparent)]
    Invalid(#[from] ScenarioError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSummary {
    pub scenario_id: String,
    pub devices: usize,
    pub steps: usize,
    pub planned_steps: usize,
    pub transport: String,
    pub total_duration_s: f64,
}

impl ScenarioSummary {
    pub fn of(s: &Scenario) -> Self {
        let planned = s.expand();
        ScenarioSummary {
            scenario_id: s.scenario_id.clone(),
            devices: s.devices.len(),
            steps: s.steps.len(),
            planned_steps: planned.len(),
            transport: s.transport.name().to_string(),
            total_duration_s: planned.iter().map(|p| p.duration_ns as f64 / 1e9).sum(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioStore {
    dir: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.starts_with('.') && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

impl ScenarioStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ScenarioStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Adds the reference scenarios that are not stored yet.
    pub fn seed_reference(&self) -> Result<(), ScenarioStoreError> {
        for r in reference_scenarios() {
            if self.get(&r.scenario.scenario_id)?.is_none() {
                self.put(&r.scenario)?;
            }
        }
        Ok(())
    }

    fn path(&self, id: &str) -> Result<PathBuf, ScenarioStoreError> {
        if !valid_id(id) {
            return Err(ScenarioStoreError::BadId(id.to_string()));
        }
        Ok(self.dir.join(format!("{id}.json")))
    }

    pub fn get(&self, id: &str) -> Result<Option<Scenario>, ScenarioStoreError> {
        let path = self.path(id)?;
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(Scenario::from_json(&text)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Validates and stores, replacing any scenario with the same id.
    pub fn put(&self, scenario: &Scenario) -> Result<(), ScenarioStoreError> {
        scenario.validate()?;
        let path = self.path(&scenario.scenario_id)?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, scenario.to_json_pretty() + "\n")?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    /// Sorted by id; unreadable files are skipped.
    pub fn list(&self) -> Result<Vec<Scenario>, ScenarioStoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                if let Ok(s) = fs::read_to_string(&path).map_err(|e| e.to_string()).and_then(|t| Scenario::from_json(&t).map_err(|e| e.to_string())) {
                    out.push(s);
                }
            }
        }
        out.sort_by(|a, b| a.scenario_id.cmp(&b.scenario_id));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_cannot_escape_the_directory() {
        for bad in ["", "../x", "a/b", ".hidden", "a b"] {
            assert!(!valid_id(bad), "{bad}");
        }
        assert!(valid_id("functional-test_v1.2"));
    }

    #[test]
    fn seed_list_get_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ScenarioStore::open(dir.path()).unwrap();
        store.seed_reference().unwrap();
        let all = store.list().unwrap();
        assert_eq!(all.len(), reference_scenarios().len());
        for s in &all {
            assert_eq!(store.get(&s.scenario_id).unwrap().as_ref(), Some(s));
        }
        assert!(store.get("missing").unwrap().is_none());
    }
}
