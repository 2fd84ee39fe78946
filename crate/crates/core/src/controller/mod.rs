//! Scenario execution, device registry and run persistence.

pub mod executor;
pub mod record;
pub mod registry;
pub mod scenario;
pub mod store;
pub mod testbed;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::control::Bus;
use executor::{execute_scenario, ExecuteError, ExecutorConfig, RunOptions};
use record::{CompletionAnnotation, RunRecord};
use registry::Registry;
use scenario::Scenario;
use store::{RunStore, StoreError};
use testbed::Testbed;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("run {0} not found")]
    NotFound(String),
    #[error("run {0} is already active")]
    RunActive(String),
    #[error("no active run {0}")]
    NotActive(String),
    #[error("completion time must be a finite, non-negative number of seconds")]
    InvalidCompletionTime,
    #[error("step {step} of run {run_id} does not take a completion annotation")]
    NotAnnotatable { run_id: String, step: usize },
    #[error(transparent)]
    Execute(#[from] ExecuteError),
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for ControllerError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(id) => ControllerError::NotFound(id),
            other => ControllerError::Store(other),
        }
    }
}

#[derive(Debug, Clone)]
struct ActiveRun {
    run_id: String,
    abort: Arc<AtomicBool>,
}

/// Handle for the single active run. Dropping it frees the slot.
#[derive(Debug)]
pub struct RunSlot<'a> {
    controller: &'a Controller,
    pub options: RunOptions,
}

impl Drop for RunSlot<'_> {
    fn drop(&mut self) {
        let mut active = self.controller.active.lock().expect("active lock");
        if active.as_ref().is_some_and(|a| a.run_id == self.options.run_id) {
            *active = None;
        }
    }
}

/// Controller state shared by the CLI and the HTTP API: the registry, the
/// run store, the event bus and the one-run-at-a-time rule.
#[derive(Debug)]
pub struct Controller {
    store: RunStore,
    registry: Arc<Mutex<Registry>>,
    bus: Bus,
    active: Mutex<Option<ActiveRun>>,
    seq: AtomicU64,
}

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl Controller {
    pub fn new(store: RunStore) -> Self {
        Controller {
            store,
            registry: Arc::new(Mutex::new(Registry::default())),
            bus: Bus::new(),
            active: Mutex::new(None),
            seq: AtomicU64::new(0),
        }
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    pub fn registry(&self) -> &Arc<Mutex<Registry>> {
        &self.registry
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn active_run(&self) -> Option<String> {
        self.active.lock().expect("active lock").as_ref().map(|a| a.run_id.clone())
    }

    /// Claims the run slot; fails while another run is active.
    pub fn begin_run(&self, config: ExecutorConfig) -> Result<RunSlot<'_>, ControllerError> {
        let mut active = self.active.lock().expect("active lock");
        if let Some(a) = active.as_ref() {
            return Err(ControllerError::RunActive(a.run_id.clone()));
        }
        let created_at_ms = now_ms();
        let run_id = format!("run-{created_at_ms}-{}", self.seq.fetch_add(1, Ordering::Relaxed));
        let mut options = RunOptions::new(run_id.clone(), config);
        options.created_at_ms = created_at_ms;
        options.events = Some(self.bus.clone());
        *active = Some(ActiveRun {
            run_id,
            abort: options.abort.clone(),
        });
        Ok(RunSlot {
            controller: self,
            options,
        })
    }

    /// Executes in the claimed slot and persists the record.
    pub fn execute(&self, slot: RunSlot<'_>, testbed: &mut dyn Testbed, scenario: &Scenario) -> Result<RunRecord, ControllerError> {
        let record = execute_scenario(testbed, scenario, &self.registry, &slot.options)?;
        self.store.persist(&record)?;
        drop(slot);
        Ok(record)
    }

    pub fn run_scenario(&self, testbed: &mut dyn Testbed, scenario: &Scenario, config: ExecutorConfig) -> Result<RunRecord, ControllerError> {
        let slot = self.begin_run(config)?;
        self.execute(slot, testbed, scenario)
    }

    pub fn abort(&self, run_id: &str) -> Result<(), ControllerError> {
        match self.active.lock().expect("active lock").as_ref() {
            Some(a) if a.run_id == run_id => {
                a.abort.store(true, Ordering::SeqCst);
                Ok(())
            }
            _ => Err(ControllerError::NotActive(run_id.to_string())),
        }
    }

    /// Records an operator's completion time for a tracked step and stores
    /// the new version of the run.
    pub fn annotate_completion(&self, run_id: &str, step_index: usize, completion_time_s: f64) -> Result<RunRecord, ControllerError> {
        if !(completion_time_s.is_finite() && completion_time_s >= 0.0) {
            return Err(ControllerError::InvalidCompletionTime);
        }
        let mut record = self.store.load(run_id)?;
        if !record.steps.iter().any(|s| s.step_index == step_index && s.tracked) {
            return Err(ControllerError::NotAnnotatable {
                run_id: run_id.to_string(),
                step: step_index,
            });
        }
        record.annotations.push(CompletionAnnotation {
            step_index,
            completion_time_s,
        });
        self.store.replace(&record)?;
        Ok(record)
    }
}
