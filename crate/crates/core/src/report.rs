//! Plain-text report renderers: SVG line charts and CSV tables.
//!
//! All number formatting is fixed-precision so identical inputs give
//! identical bytes.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::eval::EvalReport;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Provenance of every emitted artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    /// `# config_hash=...,seed=...` line prepended to CSV output.
    pub fn csv(&self, body: &str) -> String {
        format!("# config_hash={},seed={}\n{body}", self.config_hash, self.seed)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v.abs() >= 100.0 || v == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Line chart with linear axes fitted to the finite data.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], stamp: &Stamp) -> String {
    let (w, h) = (900.0, 420.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let finite = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<!-- config_hash={} seed={} -->", stamp.config_hash, stamp.seed);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=5 {
        let f = k as f64 / 5.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            top + ph + 16.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(yv) + 4.0,
            tick_label(yv)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#dddddd"/>"##,
            sy(yv),
            left + pw,
            sy(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.3" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            left + pw + 12.0,
            left + pw + 32.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            left + pw + 38.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One line of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub split: String,
    pub side: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("model,split,side,n,rmse,mae,r2,p_value,comparator\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{},{},{}",
            r.model,
            r.split,
            r.side,
            r.report.n,
            r.report.rmse,
            r.report.mae,
            opt(r.report.r2),
            opt(r.report.p_value),
            r.report.comparator.as_deref().unwrap_or("")
        );
    }
    s
}

pub fn importance_csv(ranking: &[(String, f64)]) -> String {
    let mut s = String::from("rank,feature,mean_abs_phi\n");
    for (i, (f, v)) in ranking.iter().enumerate() {
        let _ = writeln!(s, "{},{f},{v:.6}", i + 1);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stamp() -> Stamp {
        Stamp {
            config_hash: "abc".into(),
            seed: 1,
        }
    }

    #[test]
    fn chart_is_deterministic_and_escaped() {
        let series = vec![
            Series {
                name: "observed <BC>".into(),
                points: vec![(0.0, 1.0), (1.0, 3.0), (2.0, f64::NAN)],
            },
            Series {
                name: "predicted".into(),
                points: vec![(0.0, 2.0), (2.0, 2.5)],
            },
        ];
        let a = line_chart_svg("t", "x", "y", &series, &stamp());
        assert_eq!(a, line_chart_svg("t", "x", "y", &series, &stamp()));
        assert!(a.contains("observed &lt;BC&gt;"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains("config_hash=abc"));
    }

    #[test]
    fn empty_chart_renders() {
        let svg = line_chart_svg("empty", "x", "y", &[], &stamp());
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn metrics_table_columns() {
        let row = MetricRow {
            model: "xgb".into(),
            split: "stratified".into(),
            side: "test".into(),
            report: EvalReport {
                rmse: 2.0,
                mae: 1.5,
                r2: None,
                n: 4,
                p_value: Some(0.01),
                comparator: Some("lr".into()),
            },
        };
        let csv = metrics_csv(&[row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "xgb,stratified,test,4,2.000000,1.500000,,0.010000,lr");
        assert!(stamp().csv(&csv).starts_with("# config_hash=abc,seed=1\nmodel,"));
    }
}
