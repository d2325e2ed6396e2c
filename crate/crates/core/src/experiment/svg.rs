// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal standalone SVG figures.

use std::fmt::Write;

use crate::metrics::ImportanceHeatmap;

const CELL: f64 = 14.0;
const MARGIN: f64 = 40.0;

/// Features as rows, subcomponents as columns in display order.
pub fn heatmap_svg(h: &ImportanceHeatmap) -> String {
    let (n, c) = h.values.shape();
    let width = MARGIN * 2.0 + CELL * c as f64;
    let height = MARGIN * 2.0 + CELL * n as f64;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{MARGIN}" y="20" font-family="sans-serif" font-size="12">{} causal importance (one-hot probes)</text>"#,
        escape(&h.layer)
    )
    .unwrap();
    for i in 0..n {
        for k in 0..c {
            let v = h.values.get(i, k).clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)"><title>feature {i}, subcomponent {}: {v:.3}</title></rect>"#,
                MARGIN + CELL * k as f64,
                MARGIN + CELL * i as f64,
                h.permutation[k],
            )
            .unwrap();
        }
    }
    writeln!(
        s,
        r#"<text x="{MARGIN}" y="{:.1}" font-family="sans-serif" font-size="10">subcomponent (sorted)</text>"#,
        height - 12.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="12" y="{:.1}" font-family="sans-serif" font-size="10" transform="rotate(-90 12 {:.1})">input feature</text>"#,
        height / 2.0,
        height / 2.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

/// Scatter of `y` against `x` with the line `y = x`.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, x: &[f64], y: &[f64]) -> String {
    let size = 360.0;
    let plot = size - 2.0 * MARGIN;
    let lo = x.iter().chain(y).copied().fold(0.0_f64, f64::min);
    let hi = x.iter().chain(y).copied().fold(0.0_f64, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |v: f64| MARGIN + plot * (v - lo) / span;
    let py = |v: f64| size - MARGIN - plot * (v - lo) / span;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{MARGIN}" y="20" font-family="sans-serif" font-size="12">{}</text>"#,
        escape(title)
    )
    .unwrap();
    writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{plot}" height="{plot}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
        px(lo),
        py(lo),
        px(hi),
        py(hi)
    )
    .unwrap();
    for (a, b) in x.iter().zip(y) {
        writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="steelblue" fill-opacity="0.6"/>"#,
            px(*a),
            py(*b)
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
        size / 2.0,
        size - 10.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="12" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle" transform="rotate(-90 12 {:.1})">{}</text>"#,
        size / 2.0,
        size / 2.0,
        escape(y_label)
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
