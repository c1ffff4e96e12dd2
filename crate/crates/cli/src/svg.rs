//! Self-contained SVG scatter panels.

use std::fmt::Write;

use ndarray::ArrayView2;

const PANEL: f64 = 320.0;
const MARGIN: f64 = 28.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

pub struct Series {
    pub label: String,
    pub color: String,
    pub points: Vec<[f64; 2]>,
}

impl Series {
    /// First two columns of `x`.
    pub fn from_batch(label: impl Into<String>, color: impl Into<String>, x: &ArrayView2<f64>) -> Self {
        Series {
            label: label.into(),
            color: color.into(),
            points: x.rows().into_iter().map(|r| [r[0], r[1]]).collect(),
        }
    }
}

pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

/// Colour for input `n`.
pub fn input_color(n: usize) -> &'static str {
    PALETTE[n % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Panels side by side, all on one shared square axis range.
pub fn scatter_svg(panels: &[Panel]) -> String {
    let pts = panels.iter().flat_map(|p| &p.series).flat_map(|s| &s.points).filter(|p| p[0].is_finite() && p[1].is_finite());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        lo = lo.min(p[0]).min(p[1]);
        hi = hi.max(p[0]).max(p[1]);
    }
    if !(lo < hi) {
        (lo, hi) = (-1.0, 1.0);
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let scale = (PANEL - 2.0 * MARGIN) / (hi - lo);

    let width = PANEL * panels.len().max(1) as f64;
    let height = PANEL + 20.0;
    let mut out = String::new();
    writeln!(out, r#"<?xml version="1.0" encoding="UTF-8" standalone="yes"?>"#).unwrap();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#).unwrap();
    for (i, panel) in panels.iter().enumerate() {
        let x0 = i as f64 * PANEL;
        writeln!(out, r#"<g transform="translate({x0},0)">"#).unwrap();
        writeln!(
            out,
            r##"<rect x="{MARGIN}" y="{MARGIN}" width="{s}" height="{s}" fill="none" stroke="#999"/>"##,
            s = PANEL - 2.0 * MARGIN
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
            PANEL / 2.0,
            escape(&panel.title)
        )
        .unwrap();
        for s in &panel.series {
            writeln!(out, r#"<g fill="{}" fill-opacity="0.45">"#, escape(&s.color)).unwrap();
            for p in s.points.iter().filter(|p| p[0].is_finite() && p[1].is_finite()) {
                let cx = MARGIN + (p[0] - lo) * scale;
                let cy = PANEL - MARGIN - (p[1] - lo) * scale;
                writeln!(out, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="1.6"/>"#).unwrap();
            }
            writeln!(out, "</g>").unwrap();
        }
        for (k, s) in panel.series.iter().enumerate() {
            let y = PANEL + 2.0 + 12.0 * (k / 4) as f64;
            let x = MARGIN + 70.0 * (k % 4) as f64;
            writeln!(
                out,
                r#"<circle cx="{x}" cy="{}" r="4" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                y - 4.0,
                escape(&s.color),
                x + 7.0,
                y,
                escape(&s.label)
            )
            .unwrap();
        }
        writeln!(out, "</g>").unwrap();
    }
    writeln!(
        out,
        r##"<text x="{}" y="{}" text-anchor="end" fill="#666">axes [{lo:.2}, {hi:.2}]</text>"##,
        width - 4.0,
        MARGIN - 4.0
    )
    .unwrap();
    out.push_str("</svg>\n");
    out
}
