//! Offline report generation: reads a run's metrics CSV and emits static SVG
//! plots plus a text summary.
//!
//! Output files are fixed: `test_error.svg`, `lambda.svg`, `trace.svg`,
//! `a_distance.svg`, `summary.txt`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::trainer::{MetricsRecord, METRICS_HEADER};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("metrics csv row {row}: {detail}")]
    Row { row: usize, detail: String },
    #[error("metrics csv is missing column `{0}`")]
    MissingColumn(String),
    #[error("metrics csv has no values in column `{0}`")]
    EmptyColumn(String),
    #[error("plot self-check failed for {plot}: plotted max {plotted} != data max {expected}")]
    SelfCheck { plot: String, plotted: f64, expected: f64 },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub const REPORT_FILES: [&str; 5] =
    ["test_error.svg", "lambda.svg", "trace.svg", "a_distance.svg", "summary.txt"];

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>, ReportError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| ReportError::Row { row: 1, detail: "empty file".into() })?;
    let expected: Vec<&str> = METRICS_HEADER.split(',').collect();
    let got: Vec<&str> = header.split(',').collect();
    for col in &expected {
        if !got.contains(col) {
            return Err(ReportError::MissingColumn(col.to_string()));
        }
    }
    if got != expected {
        return Err(ReportError::Row { row: 1, detail: format!("header order must be `{METRICS_HEADER}`") });
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let row = i + 1;
        let parts: Vec<&str> = raw.split(',').collect();
        if parts.len() != expected.len() {
            return Err(ReportError::Row {
                row,
                detail: format!("expected {} fields, got {}", expected.len(), parts.len()),
            });
        }
        let req = |idx: usize| -> Result<f64, ReportError> {
            parts[idx]
                .parse()
                .map_err(|_| ReportError::Row { row, detail: format!("bad float `{}`", parts[idx]) })
        };
        let opt = |idx: usize| -> Result<Option<f64>, ReportError> {
            if parts[idx].is_empty() {
                Ok(None)
            } else {
                Ok(Some(req(idx)?))
            }
        };
        out.push(MetricsRecord {
            epoch: parts[0]
                .parse()
                .map_err(|_| ReportError::Row { row, detail: format!("bad epoch `{}`", parts[0]) })?,
            iter: parts[1]
                .parse()
                .map_err(|_| ReportError::Row { row, detail: format!("bad iter `{}`", parts[1]) })?,
            l_s: req(2)?,
            l_t: req(3)?,
            l_adv: req(4)?,
            l_dt: req(5)?,
            l_tr: req(6)?,
            lambda: req(7)?,
            trace_soft: req(8)?,
            trace_hard: req(9)?,
            src_acc: opt(10)?,
            tgt_acc: opt(11)?,
            a_dist: opt(12)?,
        });
    }
    Ok(out)
}

/// One named series of (x, y) points.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_B: f64 = 45.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_R: f64 = 20.0;
const COLORS: [&str; 4] = ["#c0392b", "#2980b9", "#27ae60", "#8e44ad"];

fn axis_bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

/// Renders a line plot and returns `(svg, plotted_y_max)`. The caller checks
/// the plotted maximum against the independently computed column maximum.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> (String, f64) {
    let (x_lo, x_hi) = axis_bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y_lo, y_hi) = axis_bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let plotted_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .fold(f64::NEG_INFINITY, f64::max);

    let sx = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (PLOT_W - MARGIN_L - MARGIN_R);
    let sy = |y: f64| PLOT_H - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (PLOT_H - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" viewBox="0 0 {PLOT_W} {PLOT_H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14" font-family="sans-serif">{title}</text>"#,
        PLOT_W / 2.0
    );
    // Axes.
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN_L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        PLOT_H - MARGIN_B,
        PLOT_W - MARGIN_R,
        PLOT_H - MARGIN_B
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{}" stroke="black"/>"#,
        PLOT_H - MARGIN_B
    );
    // Ticks.
    for i in 0..=4 {
        let fx = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        let fy = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="10" font-family="sans-serif">{:.3}</text>"#,
            sx(fx),
            PLOT_H - MARGIN_B + 16.0,
            fx
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="10" font-family="sans-serif">{:.3}</text>"#,
            MARGIN_L - 6.0,
            sy(fy) + 3.0,
            fy
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="11" font-family="sans-serif">{x_label}</text>"#,
        (MARGIN_L + PLOT_W - MARGIN_R) / 2.0,
        PLOT_H - 8.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="11" font-family="sans-serif" transform="rotate(-90 14 {})">{y_label}</text>"#,
        (MARGIN_T + PLOT_H - MARGIN_B) / 2.0,
        (MARGIN_T + PLOT_H - MARGIN_B) / 2.0
    );
    for (si, s) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" font-family="sans-serif" fill="{color}">{}</text>"#,
            PLOT_W - MARGIN_R - 150.0,
            MARGIN_T + 14.0 * (si as f64 + 1.0),
            s.name
        );
    }
    svg.push_str("</svg>\n");
    (svg, plotted_max)
}

/// Renders a bar chart and returns `(svg, plotted_y_max)`.
pub fn bar_plot(title: &str, x_label: &str, y_label: &str, bars: &[(String, f64)]) -> (String, f64) {
    let y_hi = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-9);
    let plotted_max = bars.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
    let inner_w = PLOT_W - MARGIN_L - MARGIN_R;
    let slot = inner_w / bars.len().max(1) as f64;
    let bw = slot * 0.7;
    let sy = |y: f64| PLOT_H - MARGIN_B - y / y_hi * (PLOT_H - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" viewBox="0 0 {PLOT_W} {PLOT_H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14" font-family="sans-serif">{title}</text>"#,
        PLOT_W / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN_L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        PLOT_H - MARGIN_B,
        PLOT_W - MARGIN_R,
        PLOT_H - MARGIN_B
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{}" stroke="black"/>"#,
        PLOT_H - MARGIN_B
    );
    for i in 0..=4 {
        let fy = y_hi * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="10" font-family="sans-serif">{:.3}</text>"#,
            MARGIN_L - 6.0,
            sy(fy) + 3.0,
            fy
        );
    }
    for (i, (name, v)) in bars.iter().enumerate() {
        let x = MARGIN_L + slot * i as f64 + (slot - bw) / 2.0;
        let y = sy(*v);
        let _ = writeln!(
            svg,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{bw:.2}" height="{:.2}" fill="#2980b9"/>"##,
            PLOT_H - MARGIN_B - y
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10" font-family="sans-serif">{name}</text>"#,
            x + bw / 2.0,
            PLOT_H - MARGIN_B + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="11" font-family="sans-serif">{x_label}</text>"#,
        (MARGIN_L + PLOT_W - MARGIN_R) / 2.0,
        PLOT_H - 8.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="11" font-family="sans-serif" transform="rotate(-90 14 {})">{y_label}</text>"#,
        (MARGIN_T + PLOT_H - MARGIN_B) / 2.0,
        (MARGIN_T + PLOT_H - MARGIN_B) / 2.0
    );
    svg.push_str("</svg>\n");
    (svg, plotted_max)
}

fn column_max(values: &[f64]) -> f64 {
    values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn check_plot(plot: &str, plotted: f64, values: &[f64]) -> Result<(), ReportError> {
    let expected = column_max(values);
    if plotted != expected {
        return Err(ReportError::SelfCheck { plot: plot.to_string(), plotted, expected });
    }
    Ok(())
}

/// Reads `<run_dir>/metrics.csv` and writes the report files into `out_dir`.
/// Returns the emitted paths.
pub fn write_report(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let metrics_path = run_dir.join("metrics.csv");
    let text = std::fs::read_to_string(&metrics_path)
        .map_err(|e| ReportError::Io { path: metrics_path.display().to_string(), source: e })?;
    let records = parse_metrics_csv(&text)?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| ReportError::Io { path: out_dir.display().to_string(), source: e })?;
    let mut written = Vec::new();
    let mut save = |name: &str, content: String| -> Result<PathBuf, ReportError> {
        let path = out_dir.join(name);
        std::fs::write(&path, content)
            .map_err(|e| ReportError::Io { path: path.display().to_string(), source: e })?;
        written.push(path.clone());
        Ok(path)
    };

    let global_iter = |r: &MetricsRecord, iters_per_epoch: usize| (r.epoch * iters_per_epoch + r.iter) as f64;
    let iters_per_epoch = records.iter().map(|r| r.iter).max().map_or(1, |m| m + 1);

    // Test error per epoch from the target accuracy column.
    let err_points: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.tgt_acc.map(|a| (r.epoch as f64, 1.0 - a)))
        .collect();
    if err_points.is_empty() {
        return Err(ReportError::EmptyColumn("tgt_acc".into()));
    }
    let err_values: Vec<f64> = err_points.iter().map(|p| p.1).collect();
    let (svg, plotted) = line_plot(
        "Target test error by epoch",
        "epoch",
        "1 - accuracy",
        &[Series { name: "target error".into(), points: err_points }],
    );
    check_plot("test_error.svg", plotted, &err_values)?;
    save("test_error.svg", svg)?;

    // Lambda per iteration.
    let lam_points: Vec<(f64, f64)> =
        records.iter().map(|r| (global_iter(r, iters_per_epoch), r.lambda)).collect();
    let lam_values: Vec<f64> = lam_points.iter().map(|p| p.1).collect();
    let (svg, plotted) = line_plot(
        "Mixing factor",
        "iteration",
        "lambda",
        &[Series { name: "lambda".into(), points: lam_points }],
    );
    check_plot("lambda.svg", plotted, &lam_values)?;
    save("lambda.svg", svg)?;

    // Soft and hard trace per iteration.
    let soft: Vec<(f64, f64)> =
        records.iter().map(|r| (global_iter(r, iters_per_epoch), r.trace_soft)).collect();
    let hard: Vec<(f64, f64)> =
        records.iter().map(|r| (global_iter(r, iters_per_epoch), r.trace_hard)).collect();
    let all_values: Vec<f64> = soft.iter().chain(hard.iter()).map(|p| p.1).collect();
    let (svg, plotted) = line_plot(
        "Transition-matrix trace",
        "iteration",
        "trace",
        &[
            Series { name: "soft trace".into(), points: soft },
            Series { name: "hard trace".into(), points: hard },
        ],
    );
    check_plot("trace.svg", plotted, &all_values)?;
    save("trace.svg", svg)?;

    // A-distance per epoch.
    let bars: Vec<(String, f64)> = records
        .iter()
        .filter_map(|r| r.a_dist.map(|a| (format!("{}", r.epoch), a)))
        .collect();
    if bars.is_empty() {
        return Err(ReportError::EmptyColumn("a_dist".into()));
    }
    let bar_values: Vec<f64> = bars.iter().map(|b| b.1).collect();
    let (svg, plotted) = bar_plot("Fused-feature A-distance by epoch", "epoch", "A-distance", &bars);
    check_plot("a_distance.svg", plotted, &bar_values)?;
    save("a_distance.svg", svg)?;

    // Text summary of the final state.
    let last = records.last().expect("non-empty records");
    let final_tgt = records.iter().rev().find_map(|r| r.tgt_acc);
    let final_src = records.iter().rev().find_map(|r| r.src_acc);
    let final_adist = records.iter().rev().find_map(|r| r.a_dist);
    let mut summary = String::new();
    let _ = writeln!(summary, "rows={}", records.len());
    let _ = writeln!(summary, "final_epoch={}", last.epoch);
    let _ = writeln!(summary, "final_lambda={}", last.lambda);
    let _ = writeln!(summary, "final_trace_soft={}", last.trace_soft);
    let _ = writeln!(summary, "final_trace_hard={}", last.trace_hard);
    if let Some(a) = final_src {
        let _ = writeln!(summary, "final_src_acc={a}");
    }
    if let Some(a) = final_tgt {
        let _ = writeln!(summary, "final_tgt_acc={a}");
    }
    if let Some(a) = final_adist {
        let _ = writeln!(summary, "final_a_dist={a}");
    }
    save("summary.txt", summary)?;

    Ok(written)
}
