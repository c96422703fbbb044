//! Minimal SVG renderings for heatmaps and line plots.

use std::fmt::Write;

const CELL: f64 = 24.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Square `n×n` row-major matrix as a white-to-red heatmap.
pub fn heatmap(matrix: &[f64], n: usize, title: &str) -> String {
    let cell = if n > 32 { (CELL * 32.0 / n as f64).max(2.0) } else { CELL };
    let size = cell * n as f64 + 2.0 * MARGIN;
    let max = matrix.iter().copied().fold(0.0, f64::max);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0}" height="{size:.0}">"#);
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="{:.0}" font-size="12">{}</text>"#, MARGIN / 2.0, escape(title));
    for r in 0..n {
        for c in 0..n {
            let v = if max > 0.0 { matrix[r * n + c] / max } else { 0.0 };
            let g = (255.0 * (1.0 - v)).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb(255,{g},{g})"><title>{:.4e}</title></rect>"#,
                MARGIN + c as f64 * cell,
                MARGIN + r as f64 * cell,
                matrix[r * n + c]
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Named `(x, y)` series on shared axes.
pub fn line_plot(series: &[(String, Vec<(f64, f64)>)], x_label: &str, y_label: &str, log_x: bool) -> String {
    let (w, h) = (480.0, 320.0);
    let tx = |x: f64| if log_x { x.max(f64::MIN_POSITIVE).log10() } else { x };
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(tx(x));
        x1 = x1.max(tx(x));
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN + (tx(x) - x0) / (x1 - x0) * (w - 2.0 * MARGIN);
    let py = |y: f64| h - MARGIN - (y - y0) / (y1 - y0) * (h - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(
        out,
        r#"<path d="M{m} {b} H{r} M{m} {b} V{m}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        b = h - MARGIN,
        r = w - MARGIN
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, w / 2.0, h - 8.0, escape(x_label));
    let _ = writeln!(out, r#"<text x="4" y="{}" font-size="11">{}</text>"#, MARGIN - 10.0, escape(y_label));
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="9">{y1:.4}</text>"#, 2.0, MARGIN + 3.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="9">{y0:.4}</text>"#, 2.0, h - MARGIN);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(j, &(x, y))| format!("{}{:.2} {:.2}", if j == 0 { 'M' } else { 'L' }, px(x), py(y)))
            .collect();
        let _ = writeln!(out, r#"<path d="{}" stroke="{color}" fill="none"/>"#, d.join(" "));
        for &(x, y) in pts {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, px(x), py(y));
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10" fill="{color}">{}</text>"#,
            w - MARGIN - 100.0,
            MARGIN + 12.0 * i as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}
