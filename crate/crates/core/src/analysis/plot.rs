//! Dependency-free SVG figures: a three-panel link-quality plot over the
//! concatenated step timeline and a completion-time box plot.

use std::fmt::Write;

use super::StepSummary;

const WIDTH: f64 = 900.0;
const PANEL_H: f64 = 180.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const GAP: f64 = 40.0;

fn plot_w() -> f64 {
    WIDTH - MARGIN_L - MARGIN_R
}

fn nice_max(v: f64) -> f64 {
    if !(v.is_finite() && v > 0.0) {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    for m in [1.0, 2.0, 5.0, 10.0] {
        if v <= m * mag {
            return m * mag;
        }
    }
    10.0 * mag
}

fn axes(svg: &mut String, top: f64, y_max: f64, label: &str) {
    let bottom = top + PANEL_H;
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN_L}" y="{top}" width="{}" height="{PANEL_H}" fill="none" stroke="black"/>"#,
        plot_w()
    );
    let _ = writeln!(
        svg,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">{label}</text>"#,
        top + PANEL_H / 2.0,
        top + PANEL_H / 2.0
    );
    for i in 0..=4 {
        let v = y_max * f64::from(i) / 4.0;
        let y = bottom - PANEL_H * f64::from(i) / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{}</text>"#,
            MARGIN_L - 4.0,
            y + 3.0,
            trim(v)
        );
    }
}

fn trim(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Step-shaded panels of SUT goodput per window, RTT p50/p95 per step and
/// dropped frames per step. Steps are laid out in ascending interferer count.
pub fn link_quality_svg(summaries: &[StepSummary]) -> String {
    let total_windows: usize = summaries.iter().map(|s| s.throughput_bps.len().max(1)).sum::<usize>().max(1);
    let x_of = |w: f64| MARGIN_L + plot_w() * w / total_windows as f64;
    let height = MARGIN_T + 3.0 * PANEL_H + 2.0 * GAP + 30.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" font-family="sans-serif">"#
    );
    let tops = [MARGIN_T, MARGIN_T + PANEL_H + GAP, MARGIN_T + 2.0 * (PANEL_H + GAP)];

    // Step shading and labels.
    let mut start = 0usize;
    for (i, s) in summaries.iter().enumerate() {
        let n = s.throughput_bps.len().max(1);
        let (x0, x1) = (x_of(start as f64), x_of((start + n) as f64));
        if i % 2 == 1 {
            for top in tops {
                let _ = writeln!(
                    svg,
                    r##"<rect x="{x0}" y="{top}" width="{}" height="{PANEL_H}" fill="#eeeeee"/>"##,
                    x1 - x0
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{} interferers</text>"#,
            (x0 + x1) / 2.0,
            MARGIN_T - 8.0,
            s.active_device_count
        );
        start += n;
    }

    let tput_max = nice_max(summaries.iter().flat_map(|s| s.throughput_bps.iter()).fold(0.0_f64, |a, &b| a.max(b)) / 1e6);
    axes(&mut svg, tops[0], tput_max, "goodput [Mbit/s]");
    let mut points = Vec::new();
    let mut w = 0usize;
    for s in summaries {
        for v in &s.throughput_bps {
            let y = tops[0] + PANEL_H - PANEL_H * (v / 1e6 / tput_max).min(1.0);
            points.push(format!("{:.2},{:.2}", x_of(w as f64 + 0.5), y));
            w += 1;
        }
        w += usize::from(s.throughput_bps.is_empty());
    }
    let _ = writeln!(
        svg,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1"/>"##,
        points.join(" ")
    );

    let rtt_max = nice_max(summaries.iter().filter_map(|s| s.rtt_p95_ns).fold(0.0, f64::max) / 1e6);
    axes(&mut svg, tops[1], rtt_max, "RTT [ms]");
    let frames_max = nice_max(summaries.iter().map(|s| s.dropped_frames as f64).fold(0.0, f64::max));
    axes(&mut svg, tops[2], frames_max, "dropped frames");
    let mut start = 0usize;
    for s in summaries {
        let n = s.throughput_bps.len().max(1);
        let (x0, x1) = (x_of(start as f64), x_of((start + n) as f64));
        for (value, color) in [(s.rtt_p50_ns, "#2ca02c"), (s.rtt_p95_ns, "#d62728")] {
            if let Some(v) = value {
                let y = tops[1] + PANEL_H - PANEL_H * (v / 1e6 / rtt_max).min(1.0);
                let _ = writeln!(
                    svg,
                    r#"<line x1="{x0}" x2="{x1}" y1="{y:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"/>"#
                );
            }
        }
        let h = PANEL_H * (s.dropped_frames as f64 / frames_max).min(1.0);
        let pad = (x1 - x0) * 0.2;
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#ff7f0e"/>"##,
            x0 + pad,
            tops[2] + PANEL_H - h,
            x1 - x0 - 2.0 * pad
        );
        start += n;
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">window (steps concatenated)</text>"#,
        MARGIN_L + plot_w() / 2.0,
        height - 8.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// Box plot of completion times per interferer count.
pub fn completion_svg(summaries: &[StepSummary]) -> String {
    let height = MARGIN_T + PANEL_H + 40.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" font-family="sans-serif">"#
    );
    let y_max = nice_max(summaries.iter().filter_map(|s| s.completion_box.map(|b| b.max)).fold(0.0, f64::max));
    axes(&mut svg, MARGIN_T, y_max, "completion time [s]");
    let slot = plot_w() / summaries.len().max(1) as f64;
    let y_of = |v: f64| MARGIN_T + PANEL_H - PANEL_H * (v / y_max).min(1.0);
    for (i, s) in summaries.iter().enumerate() {
        let cx = MARGIN_L + slot * (i as f64 + 0.5);
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.2}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            MARGIN_T + PANEL_H + 16.0,
            s.active_device_count
        );
        let Some(b) = s.completion_box else { continue };
        let half = slot * 0.2;
        let _ = writeln!(
            svg,
            r#"<line x1="{cx:.2}" x2="{cx:.2}" y1="{:.2}" y2="{:.2}" stroke="black"/>"#,
            y_of(b.min),
            y_of(b.max)
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#aec7e8" stroke="black"/>"##,
            cx - half,
            y_of(b.p75),
            2.0 * half,
            y_of(b.p25) - y_of(b.p75)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            cx + half,
            y_of(b.median),
            y_of(b.median)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">active interferers</text>"#,
        MARGIN_L + plot_w() / 2.0,
        height - 4.0
    );
    svg.push_str("</svg>\n");
    svg
}
