use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{plot, AnalysisError, StepSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Plots,
    Json,
}

impl FromStr for ExportFormat {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "plots" => Ok(ExportFormat::Plots),
            "json" => Ok(ExportFormat::Json),
            other => Err(AnalysisError::UnknownFormat(other.to_string())),
        }
    }
}

/// One row of `windows.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub active_device_count: usize,
    pub run_id: String,
    pub step_index: usize,
    pub window_index: usize,
    /// Window start relative to the step start.
    pub t_s: f64,
    pub throughput_bps: f64,
}

#[derive(Debug, Serialize)]
struct CompletionRow {
    active_device_count: usize,
    completion_time_s: f64,
}

#[derive(Debug, Serialize)]
struct StepRow {
    active_device_count: usize,
    repetitions: usize,
    offered_bps: f64,
    mean_throughput_bps: Option<f64>,
    rtt_p50_ms: Option<f64>,
    rtt_p95_ms: Option<f64>,
    rtt_max_ms: Option<f64>,
    rtt_mean_ms: Option<f64>,
    rtt_samples: usize,
    loss_ratio: Option<f64>,
    dropped_frames: u64,
    total_frames: u64,
    completion_runs: usize,
    completion_median_s: Option<f64>,
}

fn window_rows(s: &StepSummary) -> Vec<WindowRow> {
    let mut rows = Vec::with_capacity(s.throughput_bps.len());
    let mut values = s.throughput_bps.iter();
    for src in &s.sources {
        for (window_index, v) in values.by_ref().take(src.windows).enumerate() {
            rows.push(WindowRow {
                active_device_count: s.active_device_count,
                run_id: src.run_id.clone(),
                step_index: src.step_index,
                window_index,
                t_s: window_index as f64 * s.window_s,
                throughput_bps: *v,
            });
        }
    }
    rows
}

fn ms(ns: Option<f64>) -> Option<f64> {
    ns.map(|v| v / 1e6)
}

fn step_row(s: &StepSummary) -> StepRow {
    StepRow {
        active_device_count: s.active_device_count,
        repetitions: s.repetitions(),
        offered_bps: s.offered_bps,
        mean_throughput_bps: s.mean_throughput_bps,
        rtt_p50_ms: ms(s.rtt_p50_ns),
        rtt_p95_ms: ms(s.rtt_p95_ns),
        rtt_max_ms: ms(s.rtt_max_ns.map(|v| v as f64)),
        rtt_mean_ms: ms(s.rtt_mean_ns),
        rtt_samples: s.rtt_samples,
        loss_ratio: s.loss_ratio,
        dropped_frames: s.dropped_frames,
        total_frames: s.total_frames,
        completion_runs: s.completion_times_s.len(),
        completion_median_s: s.completion_median_s,
    }
}

/// Header is written even when there are no rows.
fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<(), AnalysisError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

const WINDOW_HEADER: &[&str] = &["active_device_count", "run_id", "step_index", "window_index", "t_s", "throughput_bps"];
const COMPLETION_HEADER: &[&str] = &["active_device_count", "completion_time_s"];
const STEP_HEADER: &[&str] = &[
    "active_device_count",
    "repetitions",
    "offered_bps",
    "mean_throughput_bps",
    "rtt_p50_ms",
    "rtt_p95_ms",
    "rtt_max_ms",
    "rtt_mean_ms",
    "rtt_samples",
    "loss_ratio",
    "dropped_frames",
    "total_frames",
    "completion_runs",
    "completion_median_s",
];

fn export_csv(summaries: &[StepSummary], out: &Path) -> Result<Vec<PathBuf>, AnalysisError> {
    let mut written = Vec::new();
    let path = out.join("windows.csv");
    write_csv(&path, WINDOW_HEADER, summaries.iter().flat_map(window_rows))?;
    written.push(path);

    let path = out.join("completion.csv");
    let completion = summaries.iter().flat_map(|s| {
        s.completion_times_s.iter().map(|&t| CompletionRow {
            active_device_count: s.active_device_count,
            completion_time_s: t,
        })
    });
    write_csv(&path, COMPLETION_HEADER, completion)?;
    written.push(path);

    let path = out.join("steps.csv");
    write_csv(&path, STEP_HEADER, summaries.iter().map(step_row))?;
    written.push(path);

    for s in summaries {
        let path = out.join(format!("windows_{}.csv", s.active_device_count));
        write_csv(&path, WINDOW_HEADER, window_rows(s))?;
        written.push(path);
    }
    Ok(written)
}

/// Writes the summaries to `out_dir` (created if missing) and returns the
/// paths written.
///
/// * `csv`: `windows.csv`, `completion.csv`, `steps.csv` and one
///   `windows_<count>.csv` per interferer count.
/// * `plots`: `link_quality.svg`, `completion.svg` and `completion_box.json`.
/// * `json`: `summaries.json`.
pub fn export(summaries: &[StepSummary], format: &str, out_dir: &Path) -> Result<Vec<PathBuf>, AnalysisError> {
    let format: ExportFormat = format.parse()?;
    fs::create_dir_all(out_dir)?;
    match format {
        ExportFormat::Csv => export_csv(summaries, out_dir),
        ExportFormat::Json => {
            let path = out_dir.join("summaries.json");
            fs::write(&path, serde_json::to_vec_pretty(summaries).map_err(|e| AnalysisError::Io(e.to_string()))?)?;
            Ok(vec![path])
        }
        ExportFormat::Plots => {
            let mut written = Vec::new();
            let path = out_dir.join("link_quality.svg");
            fs::write(&path, plot::link_quality_svg(summaries))?;
            written.push(path);
            let path = out_dir.join("completion.svg");
            fs::write(&path, plot::completion_svg(summaries))?;
            written.push(path);
            let path = out_dir.join("completion_box.json");
            let boxes: Vec<_> = summaries
                .iter()
                .map(|s| {
                    serde_json::json!({
                        "active_device_count": s.active_device_count,
                        "runs": s.completion_times_s.len(),
                        "box": s.completion_box,
                    })
                })
                .collect();
            fs::write(&path, serde_json::to_vec_pretty(&boxes).map_err(|e| AnalysisError::Io(e.to_string()))?)?;
            written.push(path);
            Ok(written)
        }
    }
}

pub fn read_windows_csv(path: &Path) -> Result<Vec<WindowRow>, AnalysisError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(AnalysisError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::StepSource;

    fn summary(count: usize) -> StepSummary {
        StepSummary {
            active_device_count: count,
            sources: vec![
                StepSource {
                    run_id: "r1".into(),
                    step_index: 1,
                    windows: 2,
                },
                StepSource {
                    run_id: "r2".into(),
                    step_index: 1,
                    windows: 1,
                },
            ],
            window_s: 0.5,
            offered_bps: 10e6,
            throughput_bps: vec![1.0e6, 2.5e6, 0.1],
            mean_throughput_bps: Some(3.6e6 / 3.0),
            rtt_p50_ns: None,
            rtt_p95_ns: None,
            rtt_max_ns: None,
            rtt_mean_ns: None,
            rtt_samples: 0,
            loss_ratio: None,
            dropped_frames: 0,
            total_frames: 0,
            completion_times_s: vec![55.0, 60.5],
            completion_median_s: Some(57.75),
            completion_box: None,
        }
    }

    #[test]
    fn unknown_format_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(
            export(&[], "xlsx", dir.path()),
            Err(AnalysisError::UnknownFormat("xlsx".into()))
        );
    }

    #[test]
    fn empty_csv_export_has_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let files = export(&[], "csv", dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let text = fs::read_to_string(dir.path().join("windows.csv")).unwrap();
        assert_eq!(text, format!("{}\n", WINDOW_HEADER.join(",")));
        assert!(read_windows_csv(&dir.path().join("windows.csv")).unwrap().is_empty());
    }

    #[test]
    fn windows_round_trip_with_source_attribution() {
        let dir = tempfile::tempdir().unwrap();
        let s = summary(2);
        export(std::slice::from_ref(&s), "csv", dir.path()).unwrap();
        let rows = read_windows_csv(&dir.path().join("windows.csv")).unwrap();
        assert_eq!(rows, window_rows(&s));
        assert_eq!(rows.iter().map(|r| r.run_id.as_str()).collect::<Vec<_>>(), ["r1", "r1", "r2"]);
        assert_eq!(rows.iter().map(|r| r.t_s).collect::<Vec<_>>(), [0.0, 0.5, 0.0]);
        assert_eq!(rows.iter().map(|r| r.throughput_bps).collect::<Vec<_>>(), s.throughput_bps);
        assert_eq!(read_windows_csv(&dir.path().join("windows_2.csv")).unwrap(), rows);
    }

    #[test]
    fn plots_and_json_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let s = [summary(0), summary(2)];
        let files = export(&s, "plots", dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let svg = fs::read_to_string(&files[0]).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        let files = export(&s, "json", dir.path()).unwrap();
        let back: Vec<StepSummary> = serde_json::from_slice(&fs::read(&files[0]).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
