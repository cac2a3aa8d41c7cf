//! Minimal SVG line and scatter plots.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Renders `points` with axes, four ticks per axis and labels. Points are
/// joined by a polyline unless `scatter` is set.
pub fn plot(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)], scatter: bool) -> String {
    let (x0, x1) = span(points.iter().map(|p| p.0));
    let (_, y1) = span(points.iter().map(|p| p.1));
    let y0 = 0.0f64.min(span(points.iter().map(|p| p.1)).0);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(w, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(w, r#"<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(w, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>"#);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(w, r#"<text x="{:.1}" y="{}" text-anchor="middle">{fx:.2}</text>"#, px(fx), bottom + 16.0);
        let _ = writeln!(w, r#"<text x="{}" y="{:.1}" text-anchor="end">{fy:.3}</text>"#, left - 6.0, py(fy) + 4.0);
    }
    let _ = writeln!(w, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 16.0, escape(x_label));
    let _ = writeln!(
        w,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    if scatter {
        for &(x, y) in points {
            let _ = writeln!(w, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#, px(x), py(y));
        }
    } else if !points.is_empty() {
        let coords: Vec<String> = points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(w, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, coords.join(" "));
    }
    s.push_str("</svg>\n");
    s
}
