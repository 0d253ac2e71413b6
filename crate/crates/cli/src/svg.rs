//! Minimal self-contained SVG line charts; no external assets.

use std::fmt::Write;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

const W: f64 = 800.0;
const H: f64 = 480.0;
const ML: f64 = 70.0;
const MR: f64 = 20.0;
const MT: f64 = 40.0;
const MB: f64 = 48.0;

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Render series as polylines with axes, ticks, and a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        let pad = y0.abs().max(1.0) * 0.1;
        y0 -= pad;
        y1 += pad;
    } else {
        let pad = (y1 - y0) * 0.05;
        y0 -= pad;
        y1 += pad;
    }

    let px = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let py = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    let mut out = String::new();
    let _ = write!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"##
    );
    let _ = write!(out, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = write!(
        out,
        r##"<text x="{}" y="24" text-anchor="middle" font-size="15" fill="#222">{}</text>"##,
        W / 2.0,
        escape(title)
    );

    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let gx = px(fx);
        let _ = write!(
            out,
            r##"<line x1="{gx:.1}" y1="{MT}" x2="{gx:.1}" y2="{:.1}" stroke="#e0e0e0"/>"##,
            H - MB
        );
        let _ = write!(
            out,
            r##"<text x="{gx:.1}" y="{:.1}" text-anchor="middle" fill="#444">{}</text>"##,
            H - MB + 18.0,
            tick_label(fx)
        );
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let gy = py(fy);
        let _ = write!(
            out,
            r##"<line x1="{ML}" y1="{gy:.1}" x2="{:.1}" y2="{gy:.1}" stroke="#e0e0e0"/>"##,
            W - MR
        );
        let _ = write!(
            out,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="end" fill="#444">{}</text>"##,
            ML - 8.0,
            gy + 4.0,
            tick_label(fy)
        );
    }
    let _ = write!(
        out,
        r##"<rect x="{ML}" y="{MT}" width="{:.1}" height="{:.1}" fill="none" stroke="#888"/>"##,
        W - ML - MR,
        H - MT - MB
    );
    let _ = write!(
        out,
        r##"<text x="{}" y="{:.1}" text-anchor="middle" fill="#222">{}</text>"##,
        W / 2.0,
        H - 10.0,
        escape(x_label)
    );
    let _ = write!(
        out,
        r##"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})" fill="#222">{}</text>"##,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = write!(
            out,
            r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"##,
            pts.join(" ")
        );
        let ly = MT + 16.0 + 18.0 * si as f64;
        let lx = W - MR - 170.0;
        let _ = write!(
            out,
            r##"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"##,
            lx + 22.0
        );
        let _ = write!(
            out,
            r##"<text x="{}" y="{}" fill="#222">{}</text>"##,
            lx + 28.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
