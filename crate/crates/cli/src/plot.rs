//! Minimal SVG line plots of training losses.

use std::fmt::Write;

use fairpda::trainer::LossHistory;

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;

pub fn loss_curves_svg(title: &str, history: &LossHistory) -> String {
    let series: [(&str, &str, Vec<f64>); 3] = [
        ("L_y", "#1f77b4", history.steps.iter().map(|s| s.l_y).collect()),
        ("L_d", "#d62728", history.steps.iter().map(|s| s.l_d).collect()),
        ("L_fair", "#2ca02c", history.steps.iter().map(|s| s.l_fair).collect()),
    ];
    let n = history.steps.len().max(2);
    let y_max = series
        .iter()
        .flat_map(|(_, _, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0_f64, f64::max)
        .max(1e-6);
    let px = |i: usize| MARGIN + (W - 2.0 * MARGIN) * i as f64 / (n - 1) as f64;
    let py = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * (v / y_max).clamp(0.0, 1.0);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN, H - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    let _ = writeln!(s, r#"<text x="{x0}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{y_max:.3}</text>"#, y1 + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">0</text>"#, x0 - 4.0, y0 + 4.0);
    let _ = writeln!(s, r#"<text x="{x1}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">step {}</text>"#, y0 + 16.0, history.steps.len());
    for (k, (name, colour, values)) in series.iter().enumerate() {
        if values.iter().all(|v| *v == 0.0) {
            continue;
        }
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.1},{:.1}", px(i), py(*v)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{colour}" fill="none" stroke-width="1.2"/>"#, pts.join(" "));
        let ly = MARGIN + 14.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11" fill="{colour}">{name}</text>"#, W - MARGIN - 40.0);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
