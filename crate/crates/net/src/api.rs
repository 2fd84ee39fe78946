//! North-bound HTTP JSON API and the live event stream.
//!
//! | method | path                  | success | errors            |
//! |--------|-----------------------|---------|-------------------|
//! | GET    | /agents               | 200     |                   |
//! | GET    | /scenarios            | 200     |                   |
//! | POST   | /scenarios            | 201     | 422               |
//! | GET    | /scenarios/{id}       | 200     | 404               |
//! | GET    | /runs                 | 200     |                   |
//! | POST   | /runs                 | 202     | 404, 409, 422     |
//! | GET    | /runs/{id}            | 200     | 404               |
//! | POST   | /runs/{id}/abort      | 202     | 409               |
//! | POST   | /runs/{id}/annotate   | 200     | 404, 422          |
//! | GET    | /runs/{id}/live       | 200 SSE | 404               |
//!
//! Errors are `{"error": <message>, "code": <slug>}`.

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sting_core::channel::system_now_ns;
use sting_core::control::{topic, Body, Bus, SubscriptionId};
use sting_core::controller::record::{EventEntry, RunEvent};
use sting_core::controller::registry::{AgentEntry, Reachability};
use sting_core::controller::scenario::Scenario;
use sting_core::controller::{Controller, ControllerError};
use tokio::sync::{mpsc, oneshot};
use tracing::{info, warn};

use crate::launch::TestbedFactory;
use crate::scenarios::{ScenarioStore, ScenarioStoreError, ScenarioSummary};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message, "code": self.code}))).into_response()
    }
}

impl From<ControllerError> for ApiError {
    fn from(e: ControllerError) -> Self {
        let (status, code) = match &e {
            ControllerError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ControllerError::RunActive(_) => (StatusCode::CONFLICT, "run_active"),
            ControllerError::NotActive(_) => (StatusCode::CONFLICT, "not_active"),
            ControllerError::InvalidCompletionTime | ControllerError::NotAnnotatable { .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid_annotation")
            }
            ControllerError::Execute(_) => (StatusCode::UNPROCESSABLE_ENTITY, "execution_failed"),
            ControllerError::Store(_) => (StatusCode::INTERNAL_SERVER_ERROR, "store"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<ScenarioStoreError> for ApiError {
    fn from(e: ScenarioStoreError) -> Self {
        match e {
            ScenarioStoreError::Io(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io", e.to_string()),
            _ => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_scenario", e.to_string()),
        }
    }
}

/// Runs started through the API that have no stored record (yet).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunState {
    Active,
    Failed { error: String },
}

pub struct ApiState {
    pub controller: Arc<Controller>,
    pub scenarios: ScenarioStore,
    pub testbeds: Arc<dyn TestbedFactory>,
    /// Seed override for runs whose request names none.
    pub default_seed: Option<u64>,
    board: Mutex<HashMap<String, RunState>>,
    feeder: SubscriptionId,
}

impl ApiState {
    /// Also keeps the registry current from heartbeats arriving over the
    /// broker, so `GET /agents` is accurate between runs.
    pub fn new(controller: Arc<Controller>, scenarios: ScenarioStore, testbeds: Arc<dyn TestbedFactory>) -> Arc<Self> {
        Self::with_default_seed(controller, scenarios, testbeds, None)
    }

    pub fn with_default_seed(
        controller: Arc<Controller>,
        scenarios: ScenarioStore,
        testbeds: Arc<dyn TestbedFactory>,
        default_seed: Option<u64>,
    ) -> Arc<Self> {
        let registry = controller.registry().clone();
        let feeder = controller.bus().subscribe_fn(topic::ALL_AGENT_STATUS, move |env| {
            if let Body::Status(s) = &env.body {
                registry.lock().expect("registry lock").register(s, system_now_ns());
            }
        });
        Arc::new(ApiState {
            controller,
            scenarios,
            testbeds,
            default_seed,
            board: Mutex::new(HashMap::new()),
            feeder,
        })
    }

    fn run_state(&self, run_id: &str) -> Option<RunState> {
        self.board.lock().expect("board lock").get(run_id).cloned()
    }

    fn set_state(&self, run_id: &str, state: Option<RunState>) {
        let mut board = self.board.lock().expect("board lock");
        match state {
            Some(s) => board.insert(run_id.to_string(), s),
            None => board.remove(run_id),
        };
    }
}

impl Drop for ApiState {
    fn drop(&mut self) {
        self.controller.bus().unsubscribe(self.feeder);
    }
}

pub fn router(state: Arc<ApiState>) -> Router {
    Router::new()
        .route("/agents", get(list_agents))
        .route("/scenarios", get(list_scenarios).post(create_scenario))
        .route("/scenarios/{id}", get(get_scenario))
        .route("/runs", get(list_runs).post(start_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/abort", post(abort_run))
        .route("/runs/{id}/annotate", post(annotate_run))
        .route("/runs/{id}/live", get(live))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<ApiState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    info!(addr = %listener.local_addr()?, "http api listening");
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

async fn list_agents(State(st): State<Arc<ApiState>>) -> Json<Vec<AgentEntry>> {
    let now = system_now_ns();
    let registry = st.controller.registry().lock().expect("registry lock");
    let timeout = registry.timeout_ns();
    // Reachability is evaluated here without mutating the registry, so the
    // executor still observes every transition itself.
    let agents = registry
        .list()
        .into_iter()
        .map(|mut a| {
            if now.saturating_sub(a.last_seen_ns) > timeout {
                a.reachability = Reachability::Unreachable;
            }
            a
        })
        .collect();
    Json(agents)
}

async fn list_scenarios(State(st): State<Arc<ApiState>>) -> Result<Json<Vec<ScenarioSummary>>, ApiError> {
    Ok(Json(st.scenarios.list()?.iter().map(ScenarioSummary::of).collect()))
}

async fn get_scenario(State(st): State<Arc<ApiState>>, Path(id): Path<String>) -> Result<Json<Scenario>, ApiError> {
    st.scenarios
        .get(&id)?
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("scenario {id} not found")))
}

async fn create_scenario(State(st): State<Arc<ApiState>>, body: String) -> Result<(StatusCode, Json<ScenarioSummary>), ApiError> {
    let scenario = Scenario::from_json(&body).map_err(ScenarioStoreError::from)?;
    st.scenarios.put(&scenario)?;
    Ok((StatusCode::CREATED, Json(ScenarioSummary::of(&scenario))))
}

#[derive(Debug, Serialize)]
struct RunList {
    active_run: Option<String>,
    runs: Vec<sting_core::controller::store::IndexEntry>,
}

async fn list_runs(State(st): State<Arc<ApiState>>) -> Result<Json<RunList>, ApiError> {
    let runs = st.controller.store().list().map_err(ControllerError::from)?;
    Ok(Json(RunList {
        active_run: st.controller.active_run(),
        runs,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartRun {
    #[serde(default)]
    scenario_id: Option<String>,
    /// Inline scenario; takes precedence over `scenario_id`.
    #[serde(default)]
    scenario: Option<Scenario>,
    #[serde(default)]
    seed: Option<u64>,
}

async fn start_run(State(st): State<Arc<ApiState>>, Json(req): Json<StartRun>) -> Result<(StatusCode, Json<Value>), ApiError> {
    let scenario = match (req.scenario, req.scenario_id) {
        (Some(s), _) => {
            s.validate().map_err(ScenarioStoreError::from)?;
            s
        }
        (None, Some(id)) => st
            .scenarios
            .get(&id)?
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("scenario {id} not found")))?,
        (None, None) => {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "invalid_request",
                "give scenario_id or scenario",
            ))
        }
    };
    if let Some(active) = st.controller.active_run() {
        return Err(ControllerError::RunActive(active).into());
    }
    let (tx, rx) = oneshot::channel();
    let scenario_id = scenario.scenario_id.clone();
    let worker = st.clone();
    std::thread::Builder::new()
        .name("run".into())
        .spawn(move || run_worker(&worker, &scenario, req.seed.or(worker.default_seed), tx))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "spawn", e.to_string()))?;
    match rx.await {
        Ok(Ok(run_id)) => Ok((StatusCode::ACCEPTED, Json(json!({"run_id": run_id, "scenario_id": scenario_id})))),
        Ok(Err(e)) => Err(e),
        Err(_) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "run worker vanished")),
    }
}

fn run_worker(st: &ApiState, scenario: &Scenario, seed: Option<u64>, reply: oneshot::Sender<Result<String, ApiError>>) {
    let mut testbed = match st.testbeds.build(scenario, seed) {
        Ok(tb) => tb,
        Err(e) => {
            let _ = reply.send(Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "testbed", e)));
            return;
        }
    };
    let mut slot = match st.controller.begin_run(st.testbeds.executor_config()) {
        Ok(slot) => slot,
        Err(e) => {
            let _ = reply.send(Err(e.into()));
            return;
        }
    };
    slot.options.seed_override = seed;
    let run_id = slot.options.run_id.clone();
    st.set_state(&run_id, Some(RunState::Active));
    let _ = reply.send(Ok(run_id.clone()));
    match st.controller.execute(slot, testbed.as_mut(), scenario) {
        Ok(record) => {
            info!(%run_id, status = ?record.status, "run stored");
            st.set_state(&run_id, None);
        }
        Err(e) => {
            warn!(%run_id, error = %e, "run failed");
            st.set_state(&run_id, Some(RunState::Failed { error: e.to_string() }));
        }
    }
}

async fn get_run(State(st): State<Arc<ApiState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    match st.controller.store().load_bytes(&id) {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response()),
        Err(e) => match st.run_state(&id) {
            Some(state) => {
                let mut v = serde_json::to_value(state).expect("state serializes");
                v["run_id"] = json!(id);
                Ok(Json(v).into_response())
            }
            None => Err(ControllerError::from(e).into()),
        },
    }
}

async fn abort_run(State(st): State<Arc<ApiState>>, Path(id): Path<String>) -> Result<(StatusCode, Json<Value>), ApiError> {
    st.controller.abort(&id)?;
    Ok((StatusCode::ACCEPTED, Json(json!({"run_id": id, "abort": "requested"}))))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Annotate {
    step_index: usize,
    completion_time_s: f64,
}

async fn annotate_run(
    State(st): State<Arc<ApiState>>,
    Path(id): Path<String>,
    Json(req): Json<Annotate>,
) -> Result<Response, ApiError> {
    let record = st.controller.annotate_completion(&id, req.step_index, req.completion_time_s)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], record.to_json()).into_response())
}

/// Removes the bus subscription when the client goes away.
struct SubGuard {
    bus: Bus,
    id: SubscriptionId,
}

impl Drop for SubGuard {
    fn drop(&mut self) {
        self.bus.unsubscribe(self.id);
    }
}

fn sse_event(entry: &EventEntry) -> Event {
    let data = serde_json::to_value(entry).expect("event serializes");
    let kind = data.get("event").and_then(Value::as_str).unwrap_or("event").to_string();
    Event::default().event(kind).data(data.to_string())
}

enum Live {
    Replay(std::vec::IntoIter<EventEntry>),
    Follow {
        rx: mpsc::UnboundedReceiver<EventEntry>,
        _guard: SubGuard,
        st: Arc<ApiState>,
        run_id: String,
    },
    Done,
}

/// Active runs stream events as they happen, window metrics included, and
/// end after `run_finished`. Finished runs replay their stored event log.
async fn live(
    State(st): State<Arc<ApiState>>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    // Subscribe before looking at the run so no event falls in between.
    let (tx, rx) = mpsc::unbounded_channel();
    let bus = st.controller.bus().clone();
    let sub = bus.subscribe_fn(&topic::run_events(&id), move |env| {
        if let Body::Event(e) = &env.body {
            let _ = tx.send(e.clone());
        }
    });
    let guard = SubGuard { bus, id: sub };
    let following = st.controller.active_run().as_deref() == Some(id.as_str()) || st.run_state(&id) == Some(RunState::Active);
    let state = if following {
        Live::Follow {
            rx,
            _guard: guard,
            st: st.clone(),
            run_id: id,
        }
    } else {
        drop(guard);
        let record = st.controller.store().load(&id).map_err(ControllerError::from)?;
        Live::Replay(record.events.into_iter())
    };
    let stream = futures::stream::unfold(state, |state| async move {
        match state {
            Live::Done => None,
            Live::Replay(mut it) => it.next().map(|e| (Ok(sse_event(&e)), Live::Replay(it))),
            Live::Follow {
                mut rx,
                _guard,
                st,
                run_id,
            } => loop {
                match tokio::time::timeout(Duration::from_secs(1), rx.recv()).await {
                    Ok(Some(e)) => {
                        let next = if matches!(e.event, RunEvent::RunFinished { .. }) {
                            Live::Done
                        } else {
                            Live::Follow { rx, _guard, st, run_id }
                        };
                        return Some((Ok(sse_event(&e)), next));
                    }
                    Ok(None) => return None,
                    Err(_) => {
                        // The run can end without a final event, e.g. when
                        // agents never registered.
                        let active = st.controller.active_run().as_deref() == Some(run_id.as_str());
                        if !active {
                            let failed = match st.run_state(&run_id) {
                                Some(RunState::Failed { error }) => error,
                                _ => return None,
                            };
                            let ev = Event::default().event("run_failed").data(json!({"error": failed}).to_string());
                            return Some((Ok(ev), Live::Done));
                        }
                    }
                }
            },
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
