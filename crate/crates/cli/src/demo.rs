//! One-command reproduction of the functional contention experiment: the
//! SUT and eight interferers on the emulated channel in virtual time.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sting_core::analysis::{export, summarize, StepSummary};
use sting_core::channel::TransportConfig;
use sting_core::controller::executor::ExecutorConfig;
use sting_core::controller::record::{RunRecord, RunStatus};
use sting_core::controller::store::RunStore;
use sting_core::controller::testbed::EmulatedTestbed;
use sting_core::controller::Controller;
use sting_core::library::{build_functional_test_with, FunctionalParams, SUT_DEVICE};

use crate::args::{Common, DemoArgs};
use crate::output::{summary_table, Output};

/// Step-to-step changes smaller than this fraction count as flat, so
/// sampling noise on unsaturated steps is not read as a trend reversal.
const TREND_SLACK: f64 = 0.01;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoReport {
    pub run_id: String,
    pub agents: usize,
    pub out_dir: PathBuf,
    pub written: Vec<PathBuf>,
    pub checks: Vec<Check>,
    pub steps: Vec<StepSummary>,
}

impl DemoReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Runs the first `steps` interference steps (each `step_duration_s` long),
/// stores the run under `out_dir/runs` and writes CSV tables, plots and
/// summaries to `out_dir`.
pub fn run_emulated_demo(steps: usize, step_duration_s: f64, seed: Option<u64>, out_dir: &Path) -> anyhow::Result<DemoReport> {
    anyhow::ensure!((1..=5).contains(&steps), crate::UsageError(format!("--steps must be 1 to 5, got {steps}")));
    let mut scenario = build_functional_test_with(&FunctionalParams {
        step_duration_s,
        ..FunctionalParams::default()
    });
    scenario.steps.truncate(steps);
    scenario.validate()?;
    let TransportConfig::Emulated(channel) = &scenario.transport else {
        anyhow::bail!("functional scenario is not on the emulated channel");
    };
    // Every device gets an agent, also those idle in the truncated steps.
    let ids: Vec<String> = scenario.devices.iter().map(|d| d.device_id.clone()).collect();
    let mut testbed = EmulatedTestbed::with_agents(channel.clone(), &ids, seed);

    let controller = Controller::new(RunStore::open(out_dir.join("runs"))?);
    let mut slot = controller.begin_run(ExecutorConfig::virtual_time())?;
    slot.options.seed_override = seed;
    let record = controller.execute(slot, &mut testbed, &scenario)?;

    let summaries = summarize(std::slice::from_ref(&record), SUT_DEVICE);
    let mut written = Vec::new();
    for format in ["csv", "plots", "json"] {
        written.extend(export(&summaries, format, out_dir)?);
    }
    Ok(DemoReport {
        run_id: record.run_id.clone(),
        agents: ids.len(),
        out_dir: out_dir.to_path_buf(),
        written,
        checks: checks(&record, &summaries),
        steps: summaries,
    })
}

fn checks(record: &RunRecord, summaries: &[StepSummary]) -> Vec<Check> {
    let goodput: Vec<f64> = summaries.iter().map(|s| s.mean_throughput_bps.unwrap_or(0.0)).collect();
    let rtt: Vec<f64> = summaries.iter().map(|s| s.rtt_mean_ns.unwrap_or(f64::NAN)).collect();
    let every_flow_reported = record
        .steps
        .iter()
        .all(|s| s.flows.iter().all(|f| f.sender().is_some() && f.receiver().is_some()));
    vec![
        Check {
            name: "run completed",
            pass: record.status == RunStatus::Completed && every_flow_reported,
            detail: format!("status {:?}, every flow reported: {every_flow_reported}", record.status),
        },
        Check {
            name: "SUT goodput does not rise as interferers are added",
            pass: goodput.iter().all(|g| *g > 0.0) && goodput.windows(2).all(|w| w[1] <= w[0] * (1.0 + TREND_SLACK)),
            detail: format!("Mbit/s {:?}", round_all(&goodput, 1e6)),
        },
        Check {
            name: "SUT round-trip time does not fall as interferers are added",
            pass: rtt.iter().all(|r| r.is_finite()) && rtt.windows(2).all(|w| w[1] >= w[0] * (1.0 - TREND_SLACK)),
            detail: format!("mean ms {:?}", round_all(&rtt, 1e6)),
        },
    ]
}

fn round_all(v: &[f64], unit: f64) -> Vec<f64> {
    v.iter().map(|x| (x / unit * 100.0).round() / 100.0).collect()
}

pub fn demo(common: &Common, a: &DemoArgs) -> anyhow::Result<()> {
    let report = run_emulated_demo(usize::from(a.steps), a.step_duration, common.seed, &a.out)?;
    Output { json: common.json }.emit(&report, || {
        let mut s = format!(
            "run {} with {} agents, {} steps of {} s (virtual time)\n",
            report.run_id,
            report.agents,
            report.steps.len(),
            a.step_duration
        );
        s.push_str(&summary_table(&report.steps));
        for c in &report.checks {
            s.push_str(&format!("[{}] {}: {}\n", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        s.push_str(&format!("outputs in {}\n", report.out_dir.display()));
        s
    })?;
    anyhow::ensure!(report.passed(), "demo property checks failed");
    Ok(())
}
