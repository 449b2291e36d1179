//! Hand-rolled SVG charts for the diagnostics: grouped bars for
//! per-quantile statistics and a line chart for hyperparameter sweeps.
//! Output is plain SVG text with no external assets, so the files render
//! anywhere and diff cleanly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{DacError, Result};
use crate::evaluation::{GroupLossDistribution, QuantileAttentionStats};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;

/// Fill colors cycled across series.
const PALETTE: [&str; 4] = ["#4878a8", "#e49444", "#6a9f58", "#d1605e"];

/// One cluster of bars sharing an x-axis label.
#[derive(Debug, Clone)]
pub struct BarGroup {
    pub label: String,
    /// One value per series, same order in every group.
    pub values: Vec<f64>,
}

fn check_finite(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(DacError::invalid(format!("{what} contains a non-finite value: {v}")));
        }
    }
    Ok(())
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#
    );
    let _ = write!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/><text x="{:.1}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    s
}

fn y_axis(s: &mut String, y_max: f64, y_label: &str) {
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    for tick in 0..=4 {
        let frac = tick as f64 / 4.0;
        let y = MARGIN_TOP + plot_h * (1.0 - frac);
        let value = y_max * frac;
        let _ = write!(
            s,
            r##"<line x1="{MARGIN_LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{value:.2}</text>"##,
            WIDTH - MARGIN_RIGHT,
            MARGIN_LEFT - 6.0,
            y + 4.0,
        );
    }
    let _ = write!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {:.1})">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    );
}

fn legend(s: &mut String, series: &[&str]) {
    let mut x = MARGIN_LEFT;
    let y = HEIGHT - 16.0;
    for (i, name) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = write!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{color}"/><text x="{:.1}" y="{:.1}" font-size="12">{}</text>"#,
            y - 10.0,
            x + 16.0,
            y,
            escape(name)
        );
        x += 16.0 + 8.0 * name.len() as f64 + 24.0;
    }
}

/// Renders clustered bars, one cluster per group, one bar per series.
/// The y-axis starts at zero; its top is the data maximum (at least 1.0
/// for proportion-like data so charts of probabilities stay comparable).
pub fn grouped_bar_svg(title: &str, series: &[&str], groups: &[BarGroup], y_label: &str) -> Result<String> {
    if series.is_empty() || groups.is_empty() {
        return Err(DacError::invalid("chart needs at least one series and one group"));
    }
    for g in groups {
        if g.values.len() != series.len() {
            return Err(DacError::invalid(format!(
                "group {:?} has {} values for {} series",
                g.label,
                g.values.len(),
                series.len()
            )));
        }
        check_finite(g.values.iter().copied(), "bar values")?;
        if g.values.iter().any(|&v| v < 0.0) {
            return Err(DacError::invalid("bar values must be nonnegative"));
        }
    }
    let data_max = groups
        .iter()
        .flat_map(|g| g.values.iter().copied())
        .fold(0.0f64, f64::max);
    let y_max = data_max.max(1.0);

    let mut s = svg_open(title);
    y_axis(&mut s, y_max, y_label);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let cluster_w = plot_w / groups.len() as f64;
    let bar_w = (cluster_w * 0.7) / series.len() as f64;

    for (gi, group) in groups.iter().enumerate() {
        let cluster_x = MARGIN_LEFT + cluster_w * gi as f64;
        for (si, &v) in group.values.iter().enumerate() {
            let h = plot_h * (v / y_max);
            let x = cluster_x + cluster_w * 0.15 + bar_w * si as f64;
            let y = MARGIN_TOP + plot_h - h;
            let color = PALETTE[si % PALETTE.len()];
            let _ = write!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{bar_w:.2}" height="{h:.2}" fill="{color}"><title>{}: {v:.4}</title></rect>"#,
                escape(series[si])
            );
        }
        let _ = write!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#,
            cluster_x + cluster_w / 2.0,
            MARGIN_TOP + plot_h + 18.0,
            escape(&group.label)
        );
    }
    legend(&mut s, series);
    s.push_str("</svg>");
    Ok(s)
}

/// Renders one or more polylines over a shared numeric x-axis. The y-axis
/// starts at zero and covers the data maximum (at least 1.0).
pub fn line_chart_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> Result<String> {
    if series.is_empty() || series.iter().any(|(_, pts)| pts.is_empty()) {
        return Err(DacError::invalid("chart needs at least one nonempty series"));
    }
    for (name, pts) in series {
        check_finite(pts.iter().flat_map(|&(x, y)| [x, y]), name)?;
    }
    let xs: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|&(x, _)| x)).collect();
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let y_max = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|&(_, y)| y))
        .fold(0.0f64, f64::max)
        .max(1.0);

    let mut s = svg_open(title);
    y_axis(&mut s, y_max, y_label);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        (
            MARGIN_LEFT + plot_w * ((x - x_min) / x_span),
            MARGIN_TOP + plot_h * (1.0 - y / y_max),
        )
    };

    for tick in 0..=4 {
        let frac = tick as f64 / 4.0;
        let value = x_min + x_span * frac;
        let (px, _) = to_px(value, 0.0);
        let _ = write!(
            s,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle" font-size="11">{value:.1}</text>"#,
            MARGIN_TOP + plot_h + 18.0,
        );
    }
    let _ = write!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        MARGIN_TOP + plot_h + 38.0,
        escape(x_label)
    );

    for (si, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = sorted
            .iter()
            .map(|&(x, y)| {
                let (px, py) = to_px(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = write!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(x, y) in &sorted {
            let (px, py) = to_px(x, y);
            let _ = write!(
                s,
                r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{color}"><title>{}: ({x:.3}, {y:.4})</title></circle>"#,
                escape(name)
            );
        }
    }
    legend(&mut s, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>");
    Ok(s)
}

const QUANTILE_LABELS: [&str; 4] = ["0-0.25", "0.25-0.5", "0.5-0.75", "0.75-1"];

/// Causal vs non-causal mean attribution per loss quartile.
pub fn attention_chart(stats: &QuantileAttentionStats) -> Result<String> {
    let groups: Vec<BarGroup> = (0..4)
        .map(|b| BarGroup {
            label: QUANTILE_LABELS[b].into(),
            values: vec![stats.causal[b], stats.spurious[b]],
        })
        .collect();
    grouped_bar_svg(
        "Mean attribution by loss quartile",
        &["causal region", "rest of image"],
        &groups,
        "mean attribution",
    )
}

/// Minority vs majority probability mass per loss quartile.
pub fn loss_distribution_chart(d: &GroupLossDistribution) -> Result<String> {
    let groups: Vec<BarGroup> = (0..4)
        .map(|b| BarGroup {
            label: QUANTILE_LABELS[b].into(),
            values: vec![d.minority[b], d.majority[b]],
        })
        .collect();
    grouped_bar_svg(
        "Group mass by loss quartile",
        &["minority", "majority"],
        &groups,
        "P(quartile | group)",
    )
}

/// Worst-group and average accuracy as the combination weight varies.
pub fn sweep_chart(points: &[(f64, f64, f64)]) -> Result<String> {
    let worst: Vec<(f64, f64)> = points.iter().map(|&(a, w, _)| (a, w)).collect();
    let avg: Vec<(f64, f64)> = points.iter().map(|&(a, _, v)| (a, v)).collect();
    line_chart_svg(
        "Accuracy vs combination weight",
        "alpha",
        "accuracy",
        &[("worst group", worst), ("average", avg)],
    )
}

/// Writes SVG text atomically (temp file, then rename).
pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    let tmp = path.with_extension("svg.tmp");
    std::fs::write(&tmp, svg)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
