//! Self-contained SVG line charts for frontier tables.

use std::fmt::Write as _;

use crate::data::SplitId;
use crate::eval::{FrontierTable, Method};

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 40.0, 55.0); // left, right, top, bottom
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { lo.abs().max(1.0) * 0.05 };
    (lo - pad, hi + pad)
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let (l, r, t, b) = MARGIN;
        let (pw, ph) = (W - l - r, H - t - b);
        let all = || self.series.iter().flat_map(|s| s.points.iter());
        let (x0, x1) = range(all().map(|p| p.0));
        let (y0, y1) = range(all().map(|p| p.1));
        let sx = |x: f64| l + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| t + ph - (y - y0) / (y1 - y0) * ph;

        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        )
        .unwrap();
        writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(&self.title)
        )
        .unwrap();
        writeln!(s, r##"<rect x="{l}" y="{t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##).unwrap();
        for k in 0..=4 {
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(fx),
                t + ph + 18.0,
                tick(fx)
            )
            .unwrap();
            writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                l - 6.0,
                sy(fy) + 4.0,
                tick(fy)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            l + pw / 2.0,
            H - 12.0,
            escape(&self.x_label)
        )
        .unwrap();
        writeln!(
            s,
            r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            t + ph / 2.0,
            escape(&self.y_label)
        )
        .unwrap();

        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let mut pts = series.points.clone();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
            if path.len() > 1 {
                writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    path.join(" ")
                )
                .unwrap();
            }
            for (x, y) in &pts {
                writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(*x), sy(*y)).unwrap();
            }
            let ly = t + 14.0 + 16.0 * i as f64;
            writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                l + 10.0,
                ly - 9.0,
                l + 26.0,
                ly,
                escape(&series.name)
            )
            .unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

/// GWM against conversion rate, one line per method.
pub fn frontier_chart(table: &FrontierTable, split: SplitId) -> Chart {
    let mut methods: Vec<Method> = table.points.iter().map(|p| p.method).collect();
    methods.sort();
    methods.dedup();
    Chart {
        title: format!("Efficiency frontier ({split})"),
        x_label: "conversion rate".into(),
        y_label: "GWM".into(),
        series: methods
            .into_iter()
            .map(|m| Series {
                name: m.to_string(),
                points: table
                    .select(m, split)
                    .iter()
                    .map(|p| (p.conversion_rate, p.gwm))
                    .collect(),
            })
            .collect(),
    }
}

/// Fairness scores of `fair-optigrad` against `λ_S`. Returns `None` when the
/// table has no scored fair points on `split`.
pub fn fairness_chart(table: &FrontierTable, split: SplitId) -> Option<Chart> {
    let pts = table.select(Method::FairOptiGrad, split);
    let score = |f: fn(&crate::eval::FrontierPoint) -> Option<f64>| -> Vec<(f64, f64)> {
        pts.iter().filter_map(|p| f(p).map(|v| (p.lambda_s, v))).collect()
    };
    let hgr = score(|p| p.hgr_score);
    let rdc = score(|p| p.rdc_score);
    if hgr.is_empty() && rdc.is_empty() {
        return None;
    }
    Some(Chart {
        title: format!("Price dependence on the sensitive attribute ({split})"),
        x_label: "lambda_S".into(),
        y_label: "dependence".into(),
        series: vec![
            Series {
                name: "HGR".into(),
                points: hgr,
            },
            Series {
                name: "RDC".into(),
                points: rdc,
            },
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed_enough() {
        let c = Chart {
            title: "a<b".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series {
                name: "s".into(),
                points: vec![(0.0, 1.0), (1.0, 2.0)],
            }],
        };
        let svg = c.to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg.matches("<circle").count(), 2);
    }
}
