mod common;

use common::*;
use sting_core::control::{topic, Body};
use sting_core::controller::executor::ExecutorConfig;
use sting_core::controller::record::{RunEvent, RunStatus};
use sting_core::controller::store::RunStore;
use sting_core::controller::{Controller, ControllerError};
use sting_core::library::build_parcours_test;

fn controller() -> (tempfile::TempDir, Controller) {
    let dir = tempfile::tempdir().unwrap();
    let c = Controller::new(RunStore::open(dir.path()).unwrap());
    (dir, c)
}

#[test]
fn one_run_at_a_time() {
    let (_dir, c) = controller();
    let slot = c.begin_run(ExecutorConfig::virtual_time()).unwrap();
    let id = slot.options.run_id.clone();
    assert_eq!(c.active_run(), Some(id.clone()));
    assert!(matches!(c.begin_run(ExecutorConfig::virtual_time()), Err(ControllerError::RunActive(a)) if a == id));
    c.abort(&id).unwrap();
    assert!(slot.options.abort.load(std::sync::atomic::Ordering::SeqCst));
    assert!(matches!(c.abort("other"), Err(ControllerError::NotActive(_))));
    drop(slot);
    assert_eq!(c.active_run(), None);
    assert!(c.begin_run(ExecutorConfig::virtual_time()).is_ok());
}

#[test]
fn run_is_persisted_and_events_are_broadcast() {
    let (_dir, c) = controller();
    let (_, rx) = c.bus().subscribe("sting/run/+/events");
    let s = short_functional(2.0);
    let mut tb = testbed_for(&s);
    let r = c.run_scenario(&mut tb, &s, ExecutorConfig::virtual_time()).unwrap();
    assert_eq!(r.status, RunStatus::Completed);
    assert_eq!(c.store().load(&r.run_id).unwrap(), r);
    assert_eq!(c.active_run(), None);
    let live: Vec<_> = rx.try_iter().collect();
    assert!(live.iter().all(|e| e.topic == topic::run_events(&r.run_id)));
    let windows = live
        .iter()
        .filter(|e| matches!(&e.body, Body::Event(ev) if matches!(ev.event, RunEvent::Window { .. })))
        .count();
    assert!(windows > 0, "live windows are broadcast");
    assert!(!r.events.iter().any(|e| matches!(e.event, RunEvent::Window { .. })), "windows stay out of the record");
    assert_eq!(live.len() - windows, r.events.len());
}

#[test]
fn annotations_are_validated_and_versioned() {
    let (_dir, c) = controller();
    let mut s = build_parcours_test();
    for step in &mut s.steps {
        step.duration_s = 0.2;
    }
    let mut tb = testbed_for(&s);
    let r = c.run_scenario(&mut tb, &s, ExecutorConfig::virtual_time()).unwrap();
    assert_eq!(r.annotation_slots(), 10);

    assert!(matches!(c.annotate_completion(&r.run_id, 1, -1.0), Err(ControllerError::InvalidCompletionTime)));
    assert!(matches!(c.annotate_completion(&r.run_id, 1, f64::NAN), Err(ControllerError::InvalidCompletionTime)));
    assert!(matches!(c.annotate_completion("missing", 1, 50.0), Err(ControllerError::NotFound(_))));
    assert!(matches!(c.annotate_completion(&r.run_id, 0, 50.0), Err(ControllerError::NotAnnotatable { step: 0, .. })));
    assert!(matches!(c.annotate_completion(&r.run_id, 99, 50.0), Err(ControllerError::NotAnnotatable { .. })));

    let updated = c.annotate_completion(&r.run_id, 1, 55.0).unwrap();
    assert_eq!(updated.completion_times(1).collect::<Vec<_>>(), [55.0]);
    let entry = c.store().entry(&r.run_id).unwrap();
    assert_eq!(entry.history.len(), 1);
    let stored = c.store().load(&r.run_id).unwrap();
    assert_eq!(stored.annotations, updated.annotations);
    assert_eq!(stored.steps, r.steps);
}
