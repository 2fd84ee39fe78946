use serde::Serialize;

/// Either JSON or human text on stdout, never both.
#[derive(Debug, Clone, Copy)]
pub struct Output {
    pub json: bool,
}

impl Output {
    pub fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) -> anyhow::Result<()> {
        if self.json {
            println!("{}", serde_json::to_string(value)?);
        } else {
            let text = human();
            if !text.is_empty() {
                println!("{}", text.trim_end());
            }
        }
        Ok(())
    }
}

pub fn mbps(bps: Option<f64>) -> String {
    bps.map_or("-".into(), |b| format!("{:.2}", b / 1e6))
}

pub fn ms(ns: Option<f64>) -> String {
    ns.map_or("-".into(), |n| format!("{:.2}", n / 1e6))
}

pub fn pct(ratio: Option<f64>) -> String {
    ratio.map_or("-".into(), |r| format!("{:.1}%", r * 100.0))
}

pub fn summary_table(summaries: &[sting_core::analysis::StepSummary]) -> String {
    let mut out = format!(
        "{:>11} {:>5} {:>12} {:>13} {:>12} {:>12} {:>8} {:>14}\n",
        "interferers", "reps", "offered Mb/s", "goodput Mb/s", "RTT p50 ms", "RTT p95 ms", "loss", "frames dropped"
    );
    for s in summaries {
        out.push_str(&format!(
            "{:>11} {:>5} {:>12} {:>13} {:>12} {:>12} {:>8} {:>14}\n",
            s.active_device_count,
            s.repetitions(),
            mbps(Some(s.offered_bps)),
            mbps(s.mean_throughput_bps),
            ms(s.rtt_p50_ns),
            ms(s.rtt_p95_ns),
            pct(s.loss_ratio),
            format!("{}/{}", s.dropped_frames, s.total_frames),
        ));
    }
    out
}
