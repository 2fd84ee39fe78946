//! Offline evaluation of stored runs: SUT link quality per interferer count
//! and completion-time statistics.
//!
//! All results derive from [`RunRecord`]s alone. Inputs are put into a
//! canonical order before pooling, so the output does not depend on the
//! order records are passed in.

mod export;
mod plot;

pub use export::{export, read_windows_csv, ExportFormat, WindowRow};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::record::{RunRecord, StepRecord, StepStatus};
use crate::metrics::RttStats;
use crate::parallel::{map_collect, Execution};
use crate::stats::{median, BoxStats};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("reference median is zero; relative increase is undefined")]
    DivisionByZeroMedian,
    #[error("no completion times for {0} interferers")]
    NoCompletionTimes(usize),
    #[error("unknown export format {0:?} (expected csv, plots or json)")]
    UnknownFormat(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for AnalysisError {
    fn from(e: std::io::Error) -> Self {
        AnalysisError::Io(e.to_string())
    }
}

impl From<csv::Error> for AnalysisError {
    fn from(e: csv::Error) -> Self {
        AnalysisError::Io(e.to_string())
    }
}

/// Where a pooled step came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StepSource {
    pub run_id: String,
    pub step_index: usize,
    /// Windows this step contributed to the pooled throughput series.
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    /// Number of active interferers.
    pub active_device_count: usize,
    pub sources: Vec<StepSource>,
    pub window_s: f64,
    /// SUT offered load of one source step.
    pub offered_bps: f64,
    /// Per-window SUT goodput, repetitions concatenated in source order.
    pub throughput_bps: Vec<f64>,
    pub mean_throughput_bps: Option<f64>,
    pub rtt_p50_ns: Option<f64>,
    pub rtt_p95_ns: Option<f64>,
    pub rtt_max_ns: Option<u64>,
    pub rtt_mean_ns: Option<f64>,
    pub rtt_samples: usize,
    /// Pooled over every SUT flow: missing packets / expected packets.
    pub loss_ratio: Option<f64>,
    pub dropped_frames: u64,
    pub total_frames: u64,
    /// Ascending.
    pub completion_times_s: Vec<f64>,
    pub completion_median_s: Option<f64>,
    pub completion_box: Option<BoxStats>,
}

impl StepSummary {
    pub fn repetitions(&self) -> usize {
        self.sources.len()
    }
}

/// Contribution of one tracked step, before pooling.
#[derive(Debug, Clone)]
struct Part {
    order: (u64, String, usize),
    count: usize,
    window_s: f64,
    offered_bps: f64,
    throughput_bps: Vec<f64>,
    rtt_samples: Vec<u64>,
    expected: u64,
    received: u64,
    dropped_frames: u64,
    total_frames: u64,
    completion_times_s: Vec<f64>,
}

fn step_part(record: &RunRecord, step: &StepRecord, sut: &str) -> Part {
    let mut throughput: Vec<f64> = Vec::new();
    let mut rtt_samples = Vec::new();
    let (mut expected, mut received) = (0u64, 0u64);
    let (mut dropped_frames, mut total_frames) = (0u64, 0u64);
    let mut offered = 0.0;
    let mut window_ns = (record.scenario.window_s * 1e9).round() as u64;
    for flow in step.device_flows(sut) {
        offered += flow.offered_load_bps;
        if let Some(rx) = flow.receiver() {
            window_ns = rx.window_ns;
            if throughput.len() < rx.throughput_bps.len() {
                throughput.resize(rx.throughput_bps.len(), 0.0);
            }
            for (acc, v) in throughput.iter_mut().zip(&rx.throughput_bps) {
                *acc += v;
            }
            if let Some(max) = rx.max_seq {
                expected += max + 1;
                received += rx.rx_packets;
            }
            if let Some(f) = &rx.frames {
                dropped_frames += f.dropped;
                total_frames += f.total;
            }
        }
        if let Some(tx) = flow.sender() {
            rtt_samples.extend_from_slice(&tx.rtt.samples_ns);
        }
    }
    let mut completion: Vec<f64> = record.completion_times(step.step_index).collect();
    completion.sort_by(f64::total_cmp);
    Part {
        order: (record.created_at_ms, record.run_id.clone(), step.step_index),
        count: step.interferer_count,
        window_s: window_ns as f64 / 1e9,
        offered_bps: offered,
        throughput_bps: throughput,
        rtt_samples,
        expected,
        received,
        dropped_frames,
        total_frames,
        completion_times_s: completion,
    }
}

fn record_parts(record: &RunRecord, sut: &str) -> Vec<Part> {
    record
        .steps
        .iter()
        .filter(|s| s.tracked && !matches!(s.status, StepStatus::Aborted))
        .map(|s| step_part(record, s, sut))
        .collect()
}

fn pool(count: usize, mut parts: Vec<Part>) -> StepSummary {
    parts.sort_by(|a, b| a.order.cmp(&b.order));
    let throughput_bps: Vec<f64> = parts.iter().flat_map(|p| p.throughput_bps.iter().copied()).collect();
    let mean_throughput_bps = (!throughput_bps.is_empty()).then(|| throughput_bps.iter().sum::<f64>() / throughput_bps.len() as f64);
    let rtt = RttStats::from_samples(parts.iter().flat_map(|p| p.rtt_samples.iter().copied()).collect());
    let expected: u64 = parts.iter().map(|p| p.expected).sum();
    let received: u64 = parts.iter().map(|p| p.received).sum();
    let mut completion: Vec<f64> = parts.iter().flat_map(|p| p.completion_times_s.iter().copied()).collect();
    completion.sort_by(f64::total_cmp);
    StepSummary {
        active_device_count: count,
        sources: parts
            .iter()
            .map(|p| StepSource {
                run_id: p.order.1.clone(),
                step_index: p.order.2,
                windows: p.throughput_bps.len(),
            })
            .collect(),
        window_s: parts.first().map_or(1.0, |p| p.window_s),
        offered_bps: parts.first().map_or(0.0, |p| p.offered_bps),
        mean_throughput_bps,
        throughput_bps,
        rtt_p50_ns: rtt.p50_ns,
        rtt_p95_ns: rtt.p95_ns,
        rtt_max_ns: rtt.max_ns,
        rtt_mean_ns: rtt.mean_ns,
        rtt_samples: rtt.samples_ns.len(),
        loss_ratio: (expected > 0).then(|| (expected - received.min(expected)) as f64 / expected as f64),
        dropped_frames: parts.iter().map(|p| p.dropped_frames).sum(),
        total_frames: parts.iter().map(|p| p.total_frames).sum(),
        completion_median_s: median(&completion),
        completion_box: BoxStats::from_values(&completion),
        completion_times_s: completion,
    }
}

pub fn summarize(records: &[RunRecord], sut_device_id: &str) -> Vec<StepSummary> {
    summarize_with(records, sut_device_id, Execution::default())
}

/// One summary per interferer count, ascending. Untracked and aborted steps
/// are skipped.
pub fn summarize_with(records: &[RunRecord], sut_device_id: &str, execution: Execution) -> Vec<StepSummary> {
    let parts = map_collect(records, execution, |r| record_parts(r, sut_device_id));
    let mut by_count: BTreeMap<usize, Vec<Part>> = BTreeMap::new();
    for part in parts.into_iter().flatten() {
        by_count.entry(part.count).or_default().push(part);
    }
    by_count.into_iter().map(|(count, parts)| pool(count, parts)).collect()
}

/// Percent change of the median from `reference` to `loaded`.
pub fn median_increase_from(reference_median: f64, loaded_median: f64) -> Result<f64, AnalysisError> {
    if reference_median == 0.0 {
        return Err(AnalysisError::DivisionByZeroMedian);
    }
    Ok(100.0 * (loaded_median - reference_median) / reference_median)
}

pub fn median_increase(reference: &StepSummary, loaded: &StepSummary) -> Result<f64, AnalysisError> {
    let r = reference
        .completion_median_s
        .ok_or(AnalysisError::NoCompletionTimes(reference.active_device_count))?;
    let l = loaded
        .completion_median_s
        .ok_or(AnalysisError::NoCompletionTimes(loaded.active_device_count))?;
    median_increase_from(r, l)
}
