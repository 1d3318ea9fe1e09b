//! Direct SVG emission for curve figures.

use std::fmt::Write as _;
use std::path::Path;

use super::{fmt_sig6, write_file, ReportError};

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 50.0;
const HEADER: f64 = 40.0;
const LEGEND: f64 = 36.0;

/// One x position of a series: mean value and interquartile band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesPoint {
    pub x: f64,
    pub mean: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<SeriesPoint>,
}

/// A single panel. `reference` draws a horizontal dashed line.
#[derive(Debug, Clone, PartialEq)]
pub struct Facet {
    pub title: String,
    pub series: Vec<Series>,
    pub reference: Option<f64>,
}

/// Figure-wide labels and layout. Facets fill rows of `columns` panels.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub y_range: Option<(f64, f64)>,
    pub columns: usize,
}

fn color(label: &str, index: usize) -> &'static str {
    match label {
        "random" => "#1f77b4",
        "entropy" => "#d62728",
        "coreset" => "#2ca02c",
        _ => ["#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"][index % 5],
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Tick positions covering `[lo, hi]` with steps of 1, 2 or 5 times a power of ten.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw = (hi - lo) / 10.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn tick_label(v: f64) -> String {
    let s = format!("{:.4}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

struct Axes {
    x0: f64,
    y0: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        let w = PANEL_W - MARGIN_L - MARGIN_R;
        self.x0 + MARGIN_L + if self.xr.1 > self.xr.0 { (x - self.xr.0) / (self.xr.1 - self.xr.0) * w } else { w / 2.0 }
    }
    fn py(&self, y: f64) -> f64 {
        let h = PANEL_H - MARGIN_T - MARGIN_B;
        let t = if self.yr.1 > self.yr.0 { (y - self.yr.0) / (self.yr.1 - self.yr.0) } else { 0.5 };
        self.y0 + MARGIN_T + (1.0 - t) * h
    }
}

fn check(facets: &[Facet]) -> Result<(), ReportError> {
    if facets.is_empty() {
        return Err(ReportError::Empty);
    }
    for f in facets {
        if f.series.is_empty() || f.series.iter().any(|s| s.points.is_empty()) {
            return Err(ReportError::EmptyFacet(f.title.clone()));
        }
    }
    Ok(())
}

fn data_range(facets: &[&Facet], pick: impl Fn(&SeriesPoint) -> [f64; 3]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in facets.iter().flat_map(|f| f.series.iter()).flat_map(|s| s.points.iter()) {
        for v in pick(p) {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if lo > hi { (0.0, 1.0) } else { (lo, hi) }
}

fn draw_panel(svg: &mut String, facet: &Facet, axes: &Axes, spec: &PlotSpec, labels: &[String]) {
    let (left, right) = (axes.x0 + MARGIN_L, axes.x0 + PANEL_W - MARGIN_R);
    let (top, bottom) = (axes.y0 + MARGIN_T, axes.y0 + PANEL_H - MARGIN_B);
    let _ = writeln!(svg, r#"<g class="panel" data-title="{}">"#, escape(&facet.title));
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{}</text>"#,
        (left + right) / 2.0,
        axes.y0 + 22.0,
        escape(&facet.title)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#333333"/>"##,
        right - left,
        bottom - top
    );
    for t in ticks(axes.xr.0, axes.xr.1) {
        let x = axes.px(t);
        let _ = writeln!(
            svg,
            r##"<line class="xtick" x1="{x:.2}" y1="{bottom:.2}" x2="{x:.2}" y2="{:.2}" stroke="#333333"/><text x="{x:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"##,
            bottom + 4.0,
            bottom + 16.0,
            tick_label(t)
        );
    }
    for t in ticks(axes.yr.0, axes.yr.1) {
        let y = axes.py(t);
        let _ = writeln!(
            svg,
            r##"<line class="ytick" x1="{:.2}" y1="{y:.2}" x2="{left:.2}" y2="{y:.2}" stroke="#333333"/><text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"##,
            left - 4.0,
            left - 6.0,
            y + 3.5,
            tick_label(t)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">{}</text>"#,
        (left + right) / 2.0,
        bottom + 34.0,
        escape(&spec.x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        axes.x0 + 16.0,
        (top + bottom) / 2.0,
        axes.x0 + 16.0,
        (top + bottom) / 2.0,
        escape(&spec.y_label)
    );
    for s in &facet.series {
        let idx = labels.iter().position(|l| l == &s.label).unwrap_or(0);
        let c = color(&s.label, idx);
        let upper = s.points.iter().map(|p| format!("{:.2},{:.2}", axes.px(p.x), axes.py(p.q3)));
        let lower = s.points.iter().rev().map(|p| format!("{:.2},{:.2}", axes.px(p.x), axes.py(p.q1)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            svg,
            r#"<polygon class="band" data-series="{}" fill="{c}" fill-opacity="0.2" stroke="none" points="{}"/>"#,
            escape(&s.label),
            band.join(" ")
        );
    }
    for s in &facet.series {
        let idx = labels.iter().position(|l| l == &s.label).unwrap_or(0);
        let c = color(&s.label, idx);
        let pts: Vec<String> = s.points.iter().map(|p| format!("{:.2},{:.2}", axes.px(p.x), axes.py(p.mean))).collect();
        let xs: Vec<String> = s.points.iter().map(|p| fmt_sig6(p.x)).collect();
        let ys: Vec<String> = s.points.iter().map(|p| fmt_sig6(p.mean)).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="mean" data-series="{}" data-x="{}" data-y="{}" fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#,
            escape(&s.label),
            xs.join(" "),
            ys.join(" "),
            pts.join(" ")
        );
    }
    if let Some(r) = facet.reference {
        let y = axes.py(r);
        let _ = writeln!(
            svg,
            r##"<line class="reference" data-y="{}" x1="{left:.2}" y1="{y:.2}" x2="{right:.2}" y2="{y:.2}" stroke="#000000" stroke-dasharray="5,4"/>"##,
            fmt_sig6(r)
        );
    }
    svg.push_str("</g>\n");
}

fn draw_legend(svg: &mut String, labels: &[String], y: f64) {
    svg.push_str("<g class=\"legend\">\n");
    for (i, l) in labels.iter().enumerate() {
        let x = MARGIN_L + 110.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{}" stroke-width="3"/><text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
            x + 24.0,
            color(l, i),
            x + 30.0,
            y + 4.0,
            escape(l)
        );
    }
    svg.push_str("</g>\n");
}

fn series_labels(facets: &[&Facet]) -> Vec<String> {
    let mut labels: Vec<String> = Vec::new();
    for s in facets.iter().flat_map(|f| f.series.iter()) {
        if !labels.contains(&s.label) {
            labels.push(s.label.clone());
        }
    }
    labels
}

/// Renders a facet grid to an SVG document. All panels share axis ranges.
pub fn render_panels(facets: &[Facet], spec: &PlotSpec) -> Result<String, ReportError> {
    check(facets)?;
    let refs: Vec<&Facet> = facets.iter().collect();
    let columns = spec.columns.clamp(1, facets.len());
    let rows = facets.len().div_ceil(columns);
    let xr = data_range(&refs, |p| [p.x, p.x, p.x]);
    let yr = spec.y_range.unwrap_or_else(|| data_range(&refs, |p| [p.q1, p.mean, p.q3]));
    let labels = series_labels(&refs);
    let width = PANEL_W * columns as f64;
    let height = HEADER + PANEL_H * rows as f64 + LEGEND;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r##"<rect width="{width:.0}" height="{height:.0}" fill="#ffffff"/>"##);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="26" text-anchor="middle" font-size="15">{}</text>"#,
        width / 2.0,
        escape(&spec.title)
    );
    for (i, f) in facets.iter().enumerate() {
        let axes = Axes {
            x0: PANEL_W * (i % columns) as f64,
            y0: HEADER + PANEL_H * (i / columns) as f64,
            xr,
            yr,
        };
        draw_panel(&mut svg, f, &axes, spec, &labels);
    }
    draw_legend(&mut svg, &labels, HEADER + PANEL_H * rows as f64 + LEGEND / 2.0);
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// F1-versus-budget curves with interquartile bands, one panel per facet.
pub fn render_curves(facets: &[Facet], spec: &PlotSpec, path: &Path) -> Result<(), ReportError> {
    let svg = render_panels(facets, spec)?;
    write_file(path, &svg)
}

/// Two-panel selection figure: faulty proportion per cycle with a
/// reference line, and uniqueness per cycle. Without uniqueness data the
/// second panel is replaced by a notice.
pub fn render_selection_diagnostics(
    faulty: &Facet,
    uniqueness: Option<&Facet>,
    title: &str,
    path: &Path,
) -> Result<(), ReportError> {
    let mut spec = PlotSpec {
        title: title.to_string(),
        x_label: "labeled pool (%)".into(),
        y_label: "proportion faulty".into(),
        y_range: Some((0.0, 1.0)),
        columns: 1,
    };
    let left = render_panels(std::slice::from_ref(faulty), &spec)?;
    let body_a = strip_document(&left);
    let (body_b, notice) = match uniqueness {
        Some(u) => {
            spec.y_label = "uniqueness".into();
            (Some(strip_document(&render_panels(std::slice::from_ref(u), &spec)?)), None)
        }
        None => (None, Some("uniqueness data unavailable: panel (b) omitted")),
    };
    let width = PANEL_W * 2.0;
    let height = HEADER + PANEL_H + LEGEND;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    svg.push_str(&body_a);
    match (body_b, notice) {
        (Some(b), _) => {
            let _ = writeln!(svg, r#"<g transform="translate({PANEL_W:.0} 0)">"#);
            svg.push_str(&b);
            svg.push_str("</g>\n");
        }
        (None, Some(n)) => {
            let _ = writeln!(
                svg,
                r#"<text class="notice" x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
                PANEL_W * 1.5,
                HEADER + PANEL_H / 2.0,
                n
            );
        }
        (None, None) => {}
    }
    svg.push_str("</svg>\n");
    write_file(path, &svg)
}

/// Inner elements of a single-figure document, without the root element.
fn strip_document(svg: &str) -> String {
    let mut lines: Vec<&str> = svg.lines().collect();
    lines.remove(0);
    lines.pop();
    let mut s = lines.join("\n");
    s.push('\n');
    s
}
