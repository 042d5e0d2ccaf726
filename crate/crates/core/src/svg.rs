//! Minimal SVG plots: estimated vs reference trajectories in one frame.

use std::fmt::Write;

use crate::trajectory::PlanarPath;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 32.0;

/// Longest polyline emitted per trace; longer paths are decimated.
const MAX_POINTS: usize = 2000;

/// Plots `reference` (black) and `estimate` (red) with equal axis scales.
/// Markers show the start (circle) and both endpoints (squares).
pub fn trajectory_overlay(reference: &PlanarPath, estimate: &PlanarPath, title: &str) -> String {
    let pts = |p: &PlanarPath| -> Vec<(f64, f64)> {
        let step = p.len().div_ceil(MAX_POINTS).max(1);
        let mut v: Vec<(f64, f64)> = (0..p.len()).step_by(step).map(|i| (p.x[i], p.y[i])).collect();
        if let Some(end) = p.endpoint() {
            if v.last() != Some(&end) {
                v.push(end);
            }
        }
        v
    };
    let r = pts(reference);
    let e = pts(estimate);

    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in r.iter().chain(&e).filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-6);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    // SVG y grows downward.
    let map = |(x, y): (f64, f64)| (SIZE / 2.0 + (x - cx) * scale, SIZE / 2.0 - (y - cy) * scale);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="20" font-family="sans-serif" font-size="13">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="11">scale bar {} m</text>"#,
        SIZE - 8.0,
        fmt_len(span / 4.0)
    );
    let bar = span / 4.0 * scale;
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="black" stroke-width="2"/>"#,
        SIZE - MARGIN - bar,
        SIZE - MARGIN,
        y = SIZE - 12.0
    );
    for (points, color) in [(&r, "black"), (&e, "#c0392b")] {
        if points.is_empty() {
            continue;
        }
        let mut poly = String::new();
        for &p in points {
            let (x, y) = map(p);
            let _ = write!(poly, "{x:.2},{y:.2} ");
        }
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            poly.trim_end()
        );
        let (ex, ey) = map(points[points.len() - 1]);
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="6" height="6" fill="{color}"/>"#,
            ex - 3.0,
            ey - 3.0
        );
    }
    if let Some(&p) = r.first() {
        let (x, y) = map(p);
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="none" stroke="black"/>"#);
    }
    let _ = writeln!(
        s,
        r##"<text x="{}" y="20" font-family="sans-serif" font-size="11" text-anchor="end"><tspan fill="black">reference</tspan> <tspan fill="#c0392b">estimate</tspan></text>"##,
        SIZE - MARGIN
    );
    s.push_str("</svg>\n");
    s
}

fn fmt_len(v: f64) -> String {
    let digits = if v >= 1.0 { 1 } else { 3 };
    format!("{v:.digits$}")
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
