//! Minimal SVG line charts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use autorank::train::EpochLog;

use crate::report::RestartRow;

pub const LOSS_PLOT: &str = "loss.svg";
pub const RETAINED_PLOT: &str = "retained.svg";
pub const SPECTRUM_PLOT: &str = "spectrum.svg";

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64, log: bool) -> String {
    let v = if log { 10f64.powf(v) } else { v };
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

/// Renders `series` as polylines on shared axes.
///
/// With `log_y`, non-positive values are dropped and the axis is base 10.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let transformed: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
                .map(|&(x, y)| (x, if log_y { y.log10() } else { y }))
                .collect()
        })
        .collect();
    let all = transformed.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = all.fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 <= 0.0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (x, y) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(x),
            TOP + plot_h + 16.0,
            tick_label(x, false)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            sy(y) + 4.0,
            tick_label(y, log_y)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(y_label)
    );
    for (i, (s, pts)) in series.iter().zip(&transformed).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = TOP + 12.0 + 16.0 * i as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn loss_chart(epochs: &[EpochLog]) -> String {
    let train = Series {
        label: "train".into(),
        points: epochs.iter().map(|e| (e.epoch as f64, e.train_loss)).collect(),
    };
    let eval = Series {
        label: "eval".into(),
        points: epochs
            .iter()
            .filter_map(|e| e.eval_loss.map(|l| (e.epoch as f64, l)))
            .collect(),
    };
    line_chart("Loss", "epoch", "mean squared error", &[train, eval], true)
}

pub fn retained_chart(epochs: &[EpochLog]) -> String {
    let layers = epochs.first().map_or(0, |e| e.retained.len());
    let series: Vec<Series> = (0..layers)
        .map(|j| Series {
            label: format!("adapter {j}"),
            points: epochs
                .iter()
                .map(|e| (e.epoch as f64, e.retained[j] as f64))
                .collect(),
        })
        .collect();
    line_chart("Retained count", "epoch", "I", &series, false)
}

/// Up-factor spectra before each restart of adapter 0, scaled to their largest value.
pub fn spectrum_chart(rows: &[RestartRow]) -> String {
    let series: Vec<Series> = rows
        .iter()
        .filter(|r| r.layer == 0)
        .map(|r| {
            let top = r.spectrum.up.first().copied().unwrap_or(1.0);
            let top = if top > 0.0 { top } else { 1.0 };
            Series {
                label: format!("epoch {}", r.epoch),
                points: r
                    .spectrum
                    .up
                    .iter()
                    .enumerate()
                    .map(|(i, s)| ((i + 1) as f64, s / top))
                    .collect(),
            }
        })
        .collect();
    line_chart("Up-factor spectrum at restarts", "index", "relative singular value", &series, true)
}

pub fn write_plots(dir: &Path, epochs: &[EpochLog], restarts: &[RestartRow]) -> Result<()> {
    let files = [
        (LOSS_PLOT, loss_chart(epochs)),
        (RETAINED_PLOT, retained_chart(epochs)),
        (SPECTRUM_PLOT, spectrum_chart(restarts)),
    ];
    for (name, svg) in files {
        let path = dir.join(name);
        fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
