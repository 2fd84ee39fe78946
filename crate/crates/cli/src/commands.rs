use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use serde_json::{json, Value};
use sting_core::agent::AgentConfig;
use sting_core::analysis::{export, summarize};
use sting_core::channel::ChannelConfig;
use sting_core::controller::record::{RunRecord, RunStatus};
use sting_core::controller::scenario::Scenario;
use sting_core::controller::store::RunStore;
use sting_core::controller::Controller;
use sting_core::library::{reference_scenario, reference_scenarios};
use sting_net::api::{self, ApiState};
use sting_net::broker::{Broker, ReconnectingClient};
use sting_net::launch::{LiveTestbeds, TestbedFactory, VirtualTestbeds};
use sting_net::relay::ChannelRelay;
use sting_net::runtime::{agent_filters, spawn_agent};
use sting_net::scenarios::{ScenarioStore, ScenarioSummary};
use sting_net::udp::{RelayTransport, UdpTransport};
use tracing::info;

use crate::args::*;
use crate::output::{summary_table, Output};
use crate::UsageError;

pub fn dispatch(common: &Common, command: &Command) -> anyhow::Result<()> {
    match command {
        Command::Serve(a) => serve(common, a),
        Command::Scenario(ScenarioCommand::Validate { file }) => validate(common, file),
        Command::Scenario(ScenarioCommand::Emit { name, out }) => emit(common, name, out.as_deref()),
        Command::Scenario(ScenarioCommand::Run(a)) => run_scenario(common, a),
        Command::Runs(RunsCommand::List) => list_runs(common),
        Command::Runs(RunsCommand::Show { run_id }) => show_run(common, run_id),
        Command::Runs(RunsCommand::Export { run_ids, out }) => export_runs(common, run_ids, out),
        Command::Annotate(a) => annotate(common, a),
        Command::Analyze(a) => analyze(common, a),
        Command::Demo(a) => crate::demo::demo(common, a),
        Command::Agent(a) => agent(common, a),
    }
}

fn out(common: &Common) -> Output {
    Output { json: common.json }
}

fn run_store(common: &Common) -> anyhow::Result<RunStore> {
    let dir = common.data_dir.join("runs");
    RunStore::open(&dir).with_context(|| format!("opening run store {}", dir.display()))
}

fn scenario_store(common: &Common) -> anyhow::Result<ScenarioStore> {
    let dir = common.data_dir.join("scenarios");
    ScenarioStore::open(&dir).with_context(|| format!("opening scenario store {}", dir.display()))
}

fn load_scenario(file: &Path) -> anyhow::Result<Scenario> {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    Scenario::from_json(&text).with_context(|| format!("invalid scenario {}", file.display()))
}

fn live_factory(controller: &Controller, collector_bind: &str, relay: Option<Arc<ChannelRelay>>) -> Arc<dyn TestbedFactory> {
    Arc::new(LiveTestbeds {
        bus: controller.bus().clone(),
        collector_bind: collector_bind.to_string(),
        relay,
    })
}

fn start_relay(bind: Option<&str>) -> anyhow::Result<Option<Arc<ChannelRelay>>> {
    bind.map(|b| {
        ChannelRelay::start(b, ChannelConfig::default())
            .map(Arc::new)
            .with_context(|| format!("starting channel relay on {b}"))
    })
    .transpose()
}

fn start_broker(bind: Option<&str>, controller: &Controller) -> anyhow::Result<Option<Broker>> {
    bind.map(|b| Broker::start(b, controller.bus().clone()).with_context(|| format!("starting broker on {b}")))
        .transpose()
}

fn serve(common: &Common, a: &ServeArgs) -> anyhow::Result<()> {
    let controller = Arc::new(Controller::new(run_store(common)?));
    let scenarios = scenario_store(common)?;
    scenarios.seed_reference()?;
    let broker = start_broker(a.broker.as_deref(), &controller)?;
    let relay = start_relay(a.relay.as_deref())?;
    let factory = if a.virtual_time {
        Arc::new(VirtualTestbeds) as Arc<dyn TestbedFactory>
    } else {
        live_factory(&controller, &a.collector_bind, relay.clone())
    };
    let state = ApiState::with_default_seed(controller, scenarios, factory, common.seed);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.listen)
            .await
            .with_context(|| format!("binding {}", a.listen))?;
        let http = listener.local_addr()?.to_string();
        let ready = json!({
            "http": http,
            "broker": broker.as_ref().map(|b| b.local_addr().to_string()),
            "relay": relay.as_ref().map(|r| r.local_addr().to_string()),
            "data_dir": common.data_dir,
            "virtual_time": a.virtual_time,
        });
        out(common).emit(&ready, || {
            let mut s = format!("api listening on http://{http}");
            if let Some(b) = &broker {
                s.push_str(&format!(", broker tcp://{}", b.local_addr()));
            }
            if let Some(r) = &relay {
                s.push_str(&format!(", relay {}", r.local_addr()));
            }
            s
        })?;
        api::serve(listener, state, shutdown_signal()).await?;
        anyhow::Ok(())
    })?;
    info!("controller stopped");
    Ok(())
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn validate(common: &Common, file: &Path) -> anyhow::Result<()> {
    let scenario = load_scenario(file)?;
    let summary = ScenarioSummary::of(&scenario);
    out(common).emit(&summary, || {
        format!(
            "{}: valid, {} devices, {} planned steps, {:.0} s on {}",
            summary.scenario_id, summary.devices, summary.planned_steps, summary.total_duration_s, summary.transport
        )
    })
}

fn emit(common: &Common, name: &str, dest: Option<&Path>) -> anyhow::Result<()> {
    let reference = reference_scenario(name).ok_or_else(|| {
        let names: Vec<String> = reference_scenarios().into_iter().map(|r| r.name).collect();
        UsageError(format!("unknown reference scenario {name:?}; choose one of {}", names.join(", ")))
    })?;
    let text = reference.scenario.to_json_pretty();
    match dest {
        None => println!("{text}"),
        Some(path) => {
            std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
            out(common).emit(&json!({"written": path}), || format!("wrote {}", path.display()))?;
        }
    }
    Ok(())
}

fn run_scenario(common: &Common, a: &ScenarioRunArgs) -> anyhow::Result<()> {
    let scenario = load_scenario(&a.file)?;
    let record = match &a.controller {
        Some(url) => run_remote(url, &scenario, common.seed)?,
        None => run_local(common, a, &scenario)?,
    };
    report_run(common, &record)?;
    if record.status != RunStatus::Completed {
        bail!("run {} finished {:?}", record.run_id, record.status);
    }
    Ok(())
}

fn run_local(common: &Common, a: &ScenarioRunArgs, scenario: &Scenario) -> anyhow::Result<RunRecord> {
    let controller = Arc::new(Controller::new(run_store(common)?));
    let _broker = start_broker(a.broker.as_deref(), &controller)?;
    let relay = start_relay(a.relay.as_deref())?;
    let factory = if a.real_time {
        live_factory(&controller, &a.collector_bind, relay)
    } else {
        Arc::new(VirtualTestbeds)
    };
    let mut testbed = factory.build(scenario, common.seed).map_err(|e| anyhow!("cannot run scenario: {e}"))?;
    {
        // Ctrl-C aborts the active run; the partial record is still stored.
        let c = controller.clone();
        let _ = ctrlc::set_handler(move || {
            if let Some(id) = c.active_run() {
                let _ = c.abort(&id);
            }
        });
    }
    let mut slot = controller.begin_run(factory.executor_config())?;
    slot.options.seed_override = common.seed;
    info!(run_id = %slot.options.run_id, scenario = %scenario.scenario_id, "run started");
    Ok(controller.execute(slot, testbed.as_mut(), scenario)?)
}

fn http() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(30)))
        .build()
        .into()
}

fn api_call(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>, what: &str) -> anyhow::Result<(u16, Value)> {
    let mut resp = resp.with_context(|| format!("{what}: controller unreachable"))?;
    let status = resp.status().as_u16();
    let body: Value = resp.body_mut().read_json().unwrap_or(Value::Null);
    if status >= 400 {
        let msg = body["error"].as_str().unwrap_or("request failed");
        bail!("{what}: {msg} (HTTP {status})");
    }
    Ok((status, body))
}

fn run_remote(url: &str, scenario: &Scenario, seed: Option<u64>) -> anyhow::Result<RunRecord> {
    let base = url.trim_end_matches('/');
    let agent = http();
    let (_, started) = api_call(
        agent.post(format!("{base}/runs")).send_json(json!({"scenario": scenario, "seed": seed})),
        "starting run",
    )?;
    let run_id = started["run_id"].as_str().ok_or_else(|| anyhow!("controller returned no run id"))?.to_string();
    info!(%run_id, "run submitted");
    loop {
        let (_, body) = api_call(agent.get(format!("{base}/runs/{run_id}")).call(), "polling run")?;
        match body["state"].as_str() {
            Some("active") => std::thread::sleep(Duration::from_millis(500)),
            Some("failed") => bail!("run {run_id} failed: {}", body["error"].as_str().unwrap_or("unknown error")),
            _ => return serde_json::from_value(body).context("controller returned a malformed run record"),
        }
    }
}

fn report_run(common: &Common, record: &RunRecord) -> anyhow::Result<()> {
    let summaries = record.scenario.sut_device.as_deref().map(|sut| summarize(std::slice::from_ref(record), sut));
    let value = json!({
        "run_id": record.run_id,
        "scenario_id": record.scenario.scenario_id,
        "status": record.status,
        "steps": record.steps.len(),
        "summary": summaries,
    });
    out(common).emit(&value, || {
        let mut s = format!(
            "run {} of {}: {:?}, {} steps\n",
            record.run_id,
            record.scenario.scenario_id,
            record.status,
            record.steps.len()
        );
        if let Some(sm) = &summaries {
            s.push_str(&summary_table(sm));
        }
        s
    })
}

fn list_runs(common: &Common) -> anyhow::Result<()> {
    let entries = run_store(common)?.list()?;
    out(common).emit(&entries, || {
        let mut s = format!("{:<28} {:<16} {:<10} {:>14}\n", "run", "scenario", "status", "created (ms)");
        for e in &entries {
            s.push_str(&format!(
                "{:<28} {:<16} {:<10} {:>14}\n",
                e.run_id,
                e.scenario_id,
                format!("{:?}", e.status).to_lowercase(),
                e.created_at_ms
            ));
        }
        s
    })
}

fn show_run(common: &Common, run_id: &str) -> anyhow::Result<()> {
    let record = run_store(common)?.load(run_id)?;
    out(common).emit(&record, || {
        let mut s = format!(
            "run {} of {}: {:?} on {}{}\n",
            record.run_id,
            record.scenario.scenario_id,
            record.status,
            record.metadata.transport,
            if record.metadata.virtual_time { " (virtual time)" } else { "" }
        );
        for st in &record.steps {
            s.push_str(&format!(
                "  step {:>2} {:<20} {:?}, {} active, {} flows{}\n",
                st.step_index,
                st.label,
                st.status,
                st.active_devices.len(),
                st.flows.len(),
                if st.tracked { "" } else { ", untracked" }
            ));
        }
        for a in &record.annotations {
            s.push_str(&format!("  completion step {}: {:.1} s\n", a.step_index, a.completion_time_s));
        }
        s
    })
}

fn export_runs(common: &Common, run_ids: &[String], dest: &Path) -> anyhow::Result<()> {
    let store = run_store(common)?;
    std::fs::create_dir_all(dest).with_context(|| format!("creating {}", dest.display()))?;
    let mut written = Vec::new();
    for id in run_ids {
        let bytes = store.load_bytes(id)?;
        let path = dest.join(format!("{id}.json"));
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    out(common).emit(&json!({"written": written}), || list_paths(&written))
}

fn list_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| format!("wrote {}\n", p.display())).collect()
}

fn annotate(common: &Common, a: &AnnotateArgs) -> anyhow::Result<()> {
    let record = match &a.controller {
        Some(url) => {
            let base = url.trim_end_matches('/');
            let (_, body) = api_call(
                http()
                    .post(format!("{base}/runs/{}/annotate", a.run_id))
                    .send_json(json!({"step_index": a.step, "completion_time_s": a.completion_time})),
                "annotating run",
            )?;
            serde_json::from_value::<RunRecord>(body).context("controller returned a malformed run record")?
        }
        None => Controller::new(run_store(common)?).annotate_completion(&a.run_id, a.step, a.completion_time)?,
    };
    out(common).emit(&json!({"run_id": record.run_id, "annotations": record.annotations}), || {
        format!(
            "run {}: {} completion time(s) recorded, step {} now {:?}",
            record.run_id,
            record.annotations.len(),
            a.step,
            record.completion_times(a.step).collect::<Vec<_>>()
        )
    })
}

fn analyze(common: &Common, a: &AnalyzeArgs) -> anyhow::Result<()> {
    let store = run_store(common)?;
    let records = a
        .run_ids
        .iter()
        .map(|id| store.load(id).map_err(anyhow::Error::from))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let sut = match &a.sut {
        Some(s) => s.clone(),
        None => records
            .iter()
            .find_map(|r| r.scenario.sut_device.clone())
            .ok_or_else(|| UsageError("no --sut given and the runs name no SUT device".into()))?,
    };
    let summaries = summarize(&records, &sut);
    let mut written = Vec::new();
    for format in a.format.names() {
        written.extend(export(&summaries, format, &a.out)?);
    }
    out(common).emit(&json!({"sut": sut, "written": written, "steps": summaries}), || {
        format!("{}{}", summary_table(&summaries), list_paths(&written))
    })
}

pub fn agent(common: &Common, a: &AgentArgs) -> anyhow::Result<()> {
    let mut cfg = AgentConfig::new(&a.id, a.advertise.clone().unwrap_or_default());
    cfg.heartbeat_ns = a.heartbeat_ms.max(1) * 1_000_000;
    cfg.seed_override = common.seed;
    cfg.spool = a.spool.clone();
    let link = ReconnectingClient::connect(&a.controller, &a.id, agent_filters(&a.id))
        .with_context(|| format!("connecting to controller {}", a.controller))?;
    let handle = match (a.transport, &a.relay) {
        (TransportKind::Udp, _) => spawn_agent(cfg, UdpTransport::bind(&a.bind)?, link)?,
        (TransportKind::Emulated, Some(relay)) => spawn_agent(cfg, RelayTransport::bind(&a.bind, relay)?, link)?,
        (TransportKind::Emulated, None) => return Err(UsageError("--transport emulated needs --relay".into()).into()),
    };
    let stop = handle.stop_flag();
    ctrlc::set_handler(move || stop.store(true, std::sync::atomic::Ordering::SeqCst)).context("installing signal handler")?;
    eprintln!("agent {} running; Ctrl-C to stop", a.id);
    while !handle.is_finished() {
        std::thread::sleep(Duration::from_millis(100));
    }
    let stats = handle.stop();
    out(common).emit(&stats, || {
        format!(
            "agent {} stopped: {} departures, mean lateness {:.1} us, {} over 1 ms",
            a.id,
            stats.departures,
            stats.mean_lateness_ns as f64 / 1e3,
            stats.late_over_1ms
        )
    })
}
