//! HTTP API end to end: a server on an ephemeral port, driven with a
//! blocking client.

mod common;

use std::io::{BufRead, BufReader};
use std::sync::Arc;
use std::time::Duration;

use common::{emulated, small_scenario};
use serde_json::{json, Value};
use sting_core::controller::record::RunRecord;
use sting_core::controller::store::RunStore;
use sting_core::controller::Controller;
use sting_core::library::reference_scenarios;
use sting_net::api::{serve, ApiState};
use sting_net::launch::{LiveTestbeds, TestbedFactory, VirtualTestbeds};
use sting_net::scenarios::ScenarioStore;

struct Server {
    base: String,
    _dir: tempfile::TempDir,
    _rt: tokio::runtime::Runtime,
    controller: Arc<Controller>,
}

fn start(factory: impl FnOnce(&Controller) -> Arc<dyn TestbedFactory>) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let controller = Arc::new(Controller::new(RunStore::open(dir.path().join("runs")).unwrap()));
    let scenarios = ScenarioStore::open(dir.path().join("scenarios")).unwrap();
    scenarios.seed_reference().unwrap();
    let state = ApiState::new(controller.clone(), scenarios, factory(&controller));
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    rt.spawn(serve(listener, state, std::future::pending()));
    Server {
        base,
        _dir: dir,
        _rt: rt,
        controller,
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(30)))
        .build()
        .into()
}

fn get(s: &Server, path: &str) -> (u16, Value) {
    let mut r = agent().get(format!("{}{path}", s.base)).call().unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_json().unwrap_or(Value::Null))
}

fn post(s: &Server, path: &str, body: &Value) -> (u16, Value) {
    let mut r = agent().post(format!("{}{path}", s.base)).send_json(body).unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_json().unwrap_or(Value::Null))
}

fn wait_stored(s: &Server, run_id: &str) -> RunRecord {
    let deadline = std::time::Instant::now() + Duration::from_secs(60);
    loop {
        if let Ok(r) = s.controller.store().load(run_id) {
            return r;
        }
        assert!(std::time::Instant::now() < deadline, "run {run_id} never stored");
        std::thread::sleep(Duration::from_millis(50));
    }
}

#[test]
fn scenarios_are_listed_fetched_and_validated() {
    let s = start(|_| Arc::new(VirtualTestbeds));
    let (code, list) = get(&s, "/scenarios");
    assert_eq!(code, 200);
    let ids: Vec<&str> = list.as_array().unwrap().iter().map(|v| v["scenario_id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), reference_scenarios().len());

    let (code, one) = get(&s, &format!("/scenarios/{}", ids[0]));
    assert_eq!(code, 200);
    assert_eq!(one["scenario_id"], ids[0]);
    assert_eq!(get(&s, "/scenarios/nope").0, 404);

    let mut sc = small_scenario(emulated(10_000_000, 100_000), 1e6, 1e6, &[0], 1.0);
    sc.scenario_id = "mine".into();
    let (code, created) = post(&s, "/scenarios", &serde_json::to_value(&sc).unwrap());
    assert_eq!(code, 201, "{created}");
    assert_eq!(created["planned_steps"], 1);
    sc.steps[0].duration_s = 0.0;
    let (code, err) = post(&s, "/scenarios", &serde_json::to_value(&sc).unwrap());
    assert_eq!(code, 422);
    assert_eq!(err["code"], "invalid_scenario");
    let (code, _) = post(&s, "/scenarios", &json!({"not": "a scenario"}));
    assert_eq!(code, 422);
}

#[test]
fn virtual_run_is_started_stored_replayed_and_annotated() {
    let s = start(|_| Arc::new(VirtualTestbeds));
    let sc = small_scenario(emulated(10_000_000, 100_000), 1e6, 1e6, &[0, 2], 2.0);
    let (code, started) = post(&s, "/runs", &json!({"scenario": sc, "seed": 11}));
    assert_eq!(code, 202, "{started}");
    let run_id = started["run_id"].as_str().unwrap().to_string();
    let record = wait_stored(&s, &run_id);
    assert_eq!(record.metadata.seed_override, Some(11));

    let (code, body) = get(&s, &format!("/runs/{run_id}"));
    assert_eq!(code, 200);
    let fetched: RunRecord = serde_json::from_value(body).unwrap();
    assert_eq!(fetched, record);

    let (code, list) = get(&s, "/runs");
    assert_eq!(code, 200);
    assert_eq!(list["runs"][0]["run_id"], run_id.as_str());

    // The stream of a finished run replays its stored events and ends.
    let resp = agent().get(format!("{}/runs/{run_id}/live", s.base)).call().unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    let kinds = sse_kinds(resp);
    assert_eq!(kinds.first().map(String::as_str), Some("run_started"));
    assert_eq!(kinds.last().map(String::as_str), Some("run_finished"));
    assert_eq!(kinds.len(), record.events.len());

    let (code, body) = post(&s, &format!("/runs/{run_id}/annotate"), &json!({"step_index": 0, "completion_time_s": 55.0}));
    assert_eq!(code, 200, "{body}");
    assert_eq!(body["annotations"][0]["completion_time_s"], 55.0);
    let (code, body) = post(&s, &format!("/runs/{run_id}/annotate"), &json!({"step_index": 0, "completion_time_s": -1.0}));
    assert_eq!((code, body["code"].as_str()), (422, Some("invalid_annotation")));
    assert_eq!(post(&s, "/runs/nope/annotate", &json!({"step_index": 0, "completion_time_s": 1.0})).0, 404);
    assert_eq!(get(&s, "/runs/nope").0, 404);
    assert_eq!(get(&s, "/runs/nope/live").0, 404);
    assert_eq!(post(&s, &format!("/runs/{run_id}/abort"), &json!({})).0, 409);
}

#[test]
fn unknown_or_unrunnable_scenarios_are_refused() {
    let s = start(|_| Arc::new(VirtualTestbeds));
    assert_eq!(post(&s, "/runs", &json!({"scenario_id": "missing"})).0, 404);
    assert_eq!(post(&s, "/runs", &json!({})).0, 422);
    let sc = small_scenario(sting_core::channel::TransportConfig::Udp, 1e6, 1e6, &[0], 1.0);
    let (code, body) = post(&s, "/runs", &json!({"scenario": sc}));
    assert_eq!((code, body["code"].as_str()), (422, Some("testbed")));
}

fn sse_kinds(resp: ureq::http::Response<ureq::Body>) -> Vec<String> {
    let reader = BufReader::new(resp.into_body().into_reader());
    reader
        .lines()
        .map_while(Result::ok)
        .filter_map(|l| l.strip_prefix("event: ").map(str::to_string))
        .collect()
}

#[test]
fn live_run_streams_events_rejects_a_second_start_and_aborts() {
    let s = start(|c| {
        Arc::new(LiveTestbeds {
            bus: c.bus().clone(),
            collector_bind: "127.0.0.1:0".into(),
            relay: None,
        })
    });
    let sc = small_scenario(emulated(20_000_000, 250_000), 1e6, 1e6, &[0, 2, 2], 1.0);
    let (code, started) = post(&s, "/runs", &json!({"scenario": sc}));
    assert_eq!(code, 202, "{started}");
    let run_id = started["run_id"].as_str().unwrap().to_string();

    let (code, body) = post(&s, "/runs", &json!({"scenario": sc}));
    assert_eq!((code, body["code"].as_str()), (409, Some("run_active")));
    let (code, body) = get(&s, &format!("/runs/{run_id}"));
    assert_eq!((code, body["state"].as_str()), (200, Some("active")));

    let resp = agent().get(format!("{}/runs/{run_id}/live", s.base)).call().unwrap();
    let reader = BufReader::new(resp.into_body().into_reader());
    let mut kinds = Vec::new();
    for line in reader.lines().map_while(Result::ok) {
        if let Some(k) = line.strip_prefix("event: ") {
            kinds.push(k.to_string());
            if k == "window" && !kinds.iter().any(|k| k == "abort_requested") {
                let (code, _) = post(&s, &format!("/runs/{run_id}/abort"), &json!({}));
                assert_eq!(code, 202);
            }
        }
    }
    assert!(kinds.iter().any(|k| k == "step_started"), "{kinds:?}");
    assert!(kinds.iter().any(|k| k == "window"), "{kinds:?}");
    assert!(kinds.iter().any(|k| k == "abort_requested"), "{kinds:?}");
    assert_eq!(kinds.last().map(String::as_str), Some("run_finished"));

    let record = wait_stored(&s, &run_id);
    assert_eq!(record.status, sting_core::controller::record::RunStatus::Aborted);
    // Window events are live-only.
    assert!(!record.events.iter().any(|e| matches!(e.event, sting_core::controller::record::RunEvent::Window { .. })));
}

#[test]
fn agents_endpoint_lists_heartbeats_arriving_over_the_bus() {
    let s = start(|_| Arc::new(VirtualTestbeds));
    let (code, list) = get(&s, "/agents");
    assert_eq!((code, list), (200, json!([])));
    let bus = s.controller.bus().clone();
    let link = sting_net::broker::BusLink::new(&bus, &sting_net::runtime::agent_filters("a1"));
    let _agent = sting_net::runtime::spawn_agent(
        sting_core::agent::AgentConfig::new("a1", ""),
        sting_net::udp::UdpTransport::bind("127.0.0.1:0").unwrap(),
        link,
    )
    .unwrap();
    let deadline = std::time::Instant::now() + Duration::from_secs(5);
    loop {
        let (_, list) = get(&s, "/agents");
        if let Some(a) = list.as_array().and_then(|l| l.first()) {
            assert_eq!(a["device_id"], "a1");
            assert_eq!(a["reachability"], "reachable");
            assert_eq!(a["lifecycle"], "idle");
            break;
        }
        assert!(std::time::Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(50));
    }
}
