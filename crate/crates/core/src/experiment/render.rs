//! Bound-versus-test-error figure: one panel per task, checkpoints on the x
//! axis. Output is plain SVG with fixed formatting, so identical input gives
//! identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{read_metrics_csv, MetricsRecord};

const PANEL_W: f64 = 220.0;
const PANEL_H: f64 = 170.0;
const MARGIN_L: f64 = 38.0;
const MARGIN_R: f64 = 10.0;
const MARGIN_T: f64 = 24.0;
const MARGIN_B: f64 = 28.0;
const PER_ROW: usize = 5;
const LEGEND_H: f64 = 26.0;
const BOUND_COLOR: &str = "#1f77b4";
const ERROR_COLOR: &str = "#d62728";

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace("--", "- -")
}

/// Renders parsed metrics rows; `comments` are embedded verbatim as an XML
/// comment (e.g. the config hash).
pub fn render_svg(records: &[MetricsRecord], comments: &[String]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Csv("metrics file has no rows".into()));
    }
    let mut by_task: BTreeMap<usize, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        by_task.entry(r.task).or_default().push(r);
    }
    for rows in by_task.values_mut() {
        rows.sort_by_key(|r| r.checkpoint_task);
    }
    let last = records.iter().map(|r| r.checkpoint_task).max().unwrap_or(1).max(1);
    let panels = by_task.len();
    let cols = panels.min(PER_ROW);
    let rows = panels.div_ceil(PER_ROW);
    let width = cols as f64 * PANEL_W;
    let height = LEGEND_H + rows as f64 * PANEL_H;

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="10">"#
    );
    for c in comments {
        let _ = writeln!(svg, "<!-- {} -->", escape(c));
    }
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="10" y1="13" x2="30" y2="13" stroke="{BOUND_COLOR}" stroke-width="2"/><text x="34" y="16">risk certificate</text>"#
    );
    let _ = writeln!(
        svg,
        r#"<line x1="140" y1="13" x2="160" y2="13" stroke="{ERROR_COLOR}" stroke-width="2" stroke-dasharray="4 2"/><text x="164" y="16">test error</text>"#
    );

    for (pos, (task, rows_for_task)) in by_task.iter().enumerate() {
        let ox = (pos % PER_ROW) as f64 * PANEL_W;
        let oy = LEGEND_H + (pos / PER_ROW) as f64 * PANEL_H;
        let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
        let plot_h = PANEL_H - MARGIN_T - MARGIN_B;
        let x_of = |checkpoint: usize| {
            let span = (last.saturating_sub(1)).max(1) as f64;
            let frac = if last == 1 { 0.5 } else { checkpoint.saturating_sub(1) as f64 / span };
            ox + MARGIN_L + frac * plot_w
        };
        let y_of = |v: f64| oy + MARGIN_T + (1.0 - v.clamp(0.0, 1.0)) * plot_h;

        let _ = writeln!(svg, r#"<g id="task-{task}">"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-weight="bold">Task {task}</text>"#,
            ox + MARGIN_L + plot_w / 2.0,
            oy + 14.0
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="#444"/>"##,
            ox + MARGIN_L,
            oy + MARGIN_T
        );
        for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let y = y_of(tick);
            let _ = writeln!(
                svg,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{tick:.2}</text>"##,
                ox + MARGIN_L,
                ox + MARGIN_L + plot_w,
                ox + MARGIN_L - 4.0,
                y + 3.0
            );
        }
        for checkpoint in 1..=last {
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{checkpoint}</text>"#,
                x_of(checkpoint),
                oy + PANEL_H - MARGIN_B + 12.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">after task</text>"#,
            ox + MARGIN_L + plot_w / 2.0,
            oy + PANEL_H - 4.0
        );

        let bound_pts: Vec<(f64, f64)> = rows_for_task
            .iter()
            .filter_map(|r| r.bound.map(|b| (x_of(r.checkpoint_task), y_of(b))))
            .collect();
        let error_pts: Vec<(f64, f64)> = rows_for_task
            .iter()
            .map(|r| (x_of(r.checkpoint_task), y_of(1.0 - r.accuracy)))
            .collect();
        series(&mut svg, "bound", &bound_pts, BOUND_COLOR, None);
        series(&mut svg, "test-error", &error_pts, ERROR_COLOR, Some("4 2"));
        let _ = writeln!(svg, "</g>");
    }
    let _ = writeln!(svg, "</svg>");
    Ok(svg)
}

fn series(svg: &mut String, class: &str, pts: &[(f64, f64)], color: &str, dash: Option<&str>) {
    if pts.is_empty() {
        return;
    }
    let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = dash.map(|d| format!(r#" stroke-dasharray="{d}""#)).unwrap_or_default();
    let _ = writeln!(
        svg,
        r#"<polyline class="{class}" points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
        path.join(" ")
    );
    for (x, y) in pts {
        let _ = writeln!(svg, r#"<circle class="{class}" cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{color}"/>"#);
    }
}

/// Reads a metrics CSV and writes the figure; `#` lines of the CSV are
/// carried into the SVG.
pub fn render_bound_figure(metrics_csv: &Path, out_svg: &Path) -> Result<()> {
    let text = fs::read_to_string(metrics_csv).map_err(|e| Error::io(format!("reading {}", metrics_csv.display()), e))?;
    let comments: Vec<String> = text
        .lines()
        .filter_map(|l| l.strip_prefix('#'))
        .map(|l| l.trim().to_string())
        .collect();
    let records = read_metrics_csv(text.as_bytes())?;
    let svg = render_svg(&records, &comments)?;
    fs::write(out_svg, svg).map_err(|e| Error::io(format!("writing {}", out_svg.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(checkpoint: usize, task: usize, accuracy: f64, bound: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            checkpoint_task: checkpoint,
            task,
            accuracy,
            bound,
            complement_loss: None,
            i_size: None,
            j_size: None,
        }
    }

    #[test]
    fn single_task_single_panel() {
        let svg = render_svg(&[rec(1, 1, 0.9, Some(0.3))], &["config_hash=abc".into()]).unwrap();
        assert_eq!(svg.matches("<g id=\"task-").count(), 1);
        assert_eq!(svg.matches("<circle class=\"bound\"").count(), 1);
        assert_eq!(svg.matches("<circle class=\"test-error\"").count(), 1);
        assert!(svg.contains("<!-- config_hash=abc -->"));
    }

    #[test]
    fn invalid_bound_still_renders_and_is_deterministic() {
        let rows = vec![
            rec(1, 1, 0.5, Some(0.1)),
            rec(2, 1, 0.6, Some(0.7)),
            rec(2, 2, 0.9, Some(0.2)),
        ];
        let a = render_svg(&rows, &[]).unwrap();
        let b = render_svg(&rows, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.matches("<g id=\"task-").count(), 2);
    }

    #[test]
    fn baseline_rows_render_error_only() {
        let svg = render_svg(&[rec(1, 1, 0.9, None), rec(2, 1, 0.4, None)], &[]).unwrap();
        assert!(!svg.contains("class=\"bound\""));
        assert!(render_svg(&[], &[]).is_err());
    }

    #[test]
    fn missing_columns_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("m.csv");
        fs::write(&csv, "checkpoint_task,task,accuracy\n1,1,0.5\n").unwrap();
        assert!(render_bound_figure(&csv, &dir.path().join("f.svg")).is_err());
    }
}
