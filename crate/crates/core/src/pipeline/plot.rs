//! Dependency-free SVG line charts of a metrics CSV: one panel per metric
//! column, one polyline per stage tag.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::metrics::CsvTable;

const WIDTH: f64 = 640.0;
const PANEL_H: f64 = 200.0;
const NOTE_H: f64 = 28.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 28.0;
const BOTTOM: f64 = 36.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Series {
    stage: String,
    points: Vec<(f64, f64)>,
}

/// Renders the CSV text as an SVG document.
pub fn render_svg(csv: &str) -> Result<String> {
    let table = CsvTable::parse(csv)?;
    let iter_col = table.column("iter").ok_or(Error::Csv {
        line: 1,
        msg: "header has no iter column".into(),
    })?;
    let stage_col = table.column("stage");
    let mut xs = Vec::with_capacity(table.rows.len());
    for (i, row) in table.rows.iter().enumerate() {
        let x: f64 = row[iter_col].parse().map_err(|_| Error::Csv {
            line: table.lines[i],
            msg: format!("iter {:?} is not a number", row[iter_col]),
        })?;
        xs.push(x);
    }
    // stage order is first appearance
    let mut stages: Vec<String> = Vec::new();
    for row in &table.rows {
        let s = stage_col.map(|c| row[c].clone()).unwrap_or_default();
        if !stages.contains(&s) {
            stages.push(s);
        }
    }

    enum Panel {
        Chart(String, Vec<Series>),
        Empty(String),
    }
    let mut panels = Vec::new();
    for (c, name) in table.header.iter().enumerate() {
        if c == iter_col || Some(c) == stage_col {
            continue;
        }
        let mut series: Vec<Series> = stages
            .iter()
            .map(|s| Series {
                stage: s.clone(),
                points: Vec::new(),
            })
            .collect();
        for (i, row) in table.rows.iter().enumerate() {
            let cell = &row[c];
            if cell.is_empty() {
                continue;
            }
            let y: f64 = cell.parse().map_err(|_| Error::Csv {
                line: table.lines[i],
                msg: format!("{name} value {cell:?} is not a number"),
            })?;
            if !y.is_finite() {
                continue;
            }
            let s = stage_col.map(|sc| row[sc].as_str()).unwrap_or("");
            let k = stages.iter().position(|t| t == s).unwrap_or(0);
            series[k].points.push((xs[i], y));
        }
        series.retain(|s| !s.points.is_empty());
        if series.is_empty() {
            panels.push(Panel::Empty(name.clone()));
        } else {
            panels.push(Panel::Chart(name.clone(), series));
        }
    }

    let height: f64 = 10.0
        + panels
            .iter()
            .map(|p| match p {
                Panel::Chart(..) => PANEL_H,
                Panel::Empty(_) => NOTE_H,
            })
            .sum::<f64>();
    let mut svg = String::new();
    let w = &mut svg;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let mut y0 = 5.0;
    for panel in &panels {
        match panel {
            Panel::Empty(name) => {
                let _ = writeln!(
                    w,
                    r##"<text class="note" x="{LEFT}" y="{:.2}" fill="#777">{}: no values, skipped</text>"##,
                    y0 + NOTE_H / 2.0 + 4.0,
                    escape(name)
                );
                y0 += NOTE_H;
            }
            Panel::Chart(name, series) => {
                chart(w, name, series, y0);
                y0 += PANEL_H;
            }
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in v {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { lo.abs() * 0.05 } else { 1.0 };
        (lo - pad, hi + pad)
    } else {
        (lo, hi)
    }
}

fn chart(w: &mut String, name: &str, series: &[Series], y0: f64) {
    let (x_lo, x_hi) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (v_lo, v_hi) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = PANEL_H - TOP - BOTTOM;
    let top = y0 + TOP;
    let bottom = top + plot_h;
    let px = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let py = |v: f64| bottom - (v - v_lo) / (v_hi - v_lo) * plot_h;
    let name = escape(name);
    let _ = writeln!(w, r#"<g class="panel" id="panel-{name}">"#);
    let _ = writeln!(
        w,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-weight="bold">{name}</text>"#,
        LEFT + plot_w / 2.0,
        y0 + 16.0
    );
    let _ = writeln!(
        w,
        r##"<rect x="{LEFT}" y="{top:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="#999"/>"##
    );
    // y ticks at the ends and middle
    for v in [v_lo, 0.5 * (v_lo + v_hi), v_hi] {
        let _ = writeln!(
            w,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 4.0,
            py(v) + 4.0,
            tick(v)
        );
    }
    for x in [x_lo, x_hi] {
        let _ = writeln!(
            w,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            px(x),
            bottom + 14.0,
            tick(x)
        );
    }
    let _ = writeln!(
        w,
        r#"<text class="axis-label" x="{:.2}" y="{:.2}" text-anchor="middle">iter</text>"#,
        LEFT + plot_w / 2.0,
        bottom + 28.0
    );
    let _ = writeln!(
        w,
        r#"<text class="axis-label" x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{name}</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts = String::new();
        for (i, &(x, v)) in s.points.iter().enumerate() {
            if i > 0 {
                pts.push(' ');
            }
            let _ = write!(pts, "{:.2},{:.2}", px(x), py(v));
        }
        let _ = writeln!(
            w,
            r#"<polyline data-stage="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>"#,
            escape(&s.stage)
        );
        let _ = writeln!(
            w,
            r#"<text x="{:.2}" y="{:.2}" fill="{color}" text-anchor="end">{}</text>"#,
            WIDTH - RIGHT - 4.0,
            top + 14.0 + 13.0 * k as f64,
            escape(&s.stage)
        );
    }
    w.push_str("</g>\n");
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Reads `metrics` and writes the chart to `svg`.
pub fn plot(metrics: &Path, svg: &Path) -> Result<()> {
    let text = std::fs::read_to_string(metrics)?;
    let out = render_svg(&text)?;
    if let Some(dir) = svg.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(svg, out)?;
    Ok(())
}
