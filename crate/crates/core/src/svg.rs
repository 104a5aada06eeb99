//! Minimal SVG line and step charts.

use std::fmt::Write;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, Default)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Draw as a zero-order hold.
    pub step: bool,
    pub dashed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Panel {
    pub title: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Horizontal reference lines (value, label).
    pub hlines: Vec<(f64, String)>,
    /// Stack the series on top of each other (areas).
    pub stacked: bool,
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn stacked(series: &[Series]) -> Vec<Series> {
    let mut acc: Vec<f64> = Vec::new();
    series
        .iter()
        .map(|s| {
            if acc.len() < s.points.len() {
                acc.resize(s.points.len(), 0.0);
            }
            let points = s
                .points
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| {
                    acc[i] += y;
                    (x, acc[i])
                })
                .collect();
            Series {
                points,
                ..s.clone()
            }
        })
        .collect()
}

/// Panels share the x axis and are stacked vertically.
pub fn render(panels: &[Panel], x_label: &str, width: f64, panel_height: f64) -> String {
    let (ml, mr, mt, mb) = (70.0, 150.0, 28.0, 36.0);
    let height = panel_height * panels.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let all_x = panels
        .iter()
        .flat_map(|p| p.series.iter().flat_map(|s| s.points.iter().map(|q| q.0)));
    let (x0, x1) = range(all_x);
    for (k, panel) in panels.iter().enumerate() {
        let series = if panel.stacked {
            stacked(&panel.series)
        } else {
            panel.series.clone()
        };
        let top = k as f64 * panel_height;
        let (px0, px1) = (ml, width - mr);
        let (py0, py1) = (top + mt, top + panel_height - mb);
        let ys = series
            .iter()
            .flat_map(|s| s.points.iter().map(|q| q.1))
            .chain(panel.hlines.iter().map(|h| h.0));
        let (y0, y1) = range(ys);
        let sx = |x: f64| px0 + (x - x0) / (x1 - x0) * (px1 - px0);
        let sy = |y: f64| py1 - (y - y0) / (y1 - y0) * (py1 - py0);
        let _ = writeln!(
            out,
            r#"<rect x="{px0}" y="{py0}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            px1 - px0,
            py1 - py0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="13">{}</text>"#,
            px0,
            py0 - 8.0,
            esc(&panel.title)
        );
        let _ = writeln!(
            out,
            r#"<text transform="translate(14,{}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (py0 + py1) / 2.0,
            esc(&panel.y_label)
        );
        for i in 0..=4 {
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let _ = writeln!(
                out,
                r##"<line x1="{px0}" x2="{px1}" y1="{0:.2}" y2="{0:.2}" stroke="#ddd"/><text x="{1}" y="{0:.2}" text-anchor="end" dy="4">{2:.3}</text>"##,
                sy(fy),
                px0 - 4.0,
                fy
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{}" text-anchor="middle">{:.0}</text>"#,
                sx(fx),
                py1 + 14.0,
                fx
            );
        }
        for (v, label) in &panel.hlines {
            let _ = writeln!(
                out,
                r##"<line x1="{px0}" x2="{px1}" y1="{0:.2}" y2="{0:.2}" stroke="#888" stroke-dasharray="2,3"/><text x="{1}" y="{0:.2}" dy="4" fill="#555">{2}</text>"##,
                sy(*v),
                px1 + 4.0,
                esc(label)
            );
        }
        for (j, s) in series.iter().enumerate() {
            let color = PALETTE[j % PALETTE.len()];
            let mut d = String::new();
            let mut prev: Option<f64> = None;
            for &(x, y) in &s.points {
                match prev {
                    None => {
                        let _ = write!(d, "M{:.2},{:.2}", sx(x), sy(y));
                    }
                    Some(py) if s.step => {
                        let _ =
                            write!(d, " L{:.2},{:.2} L{:.2},{:.2}", sx(x), sy(py), sx(x), sy(y));
                    }
                    Some(_) => {
                        let _ = write!(d, " L{:.2},{:.2}", sx(x), sy(y));
                    }
                }
                prev = Some(y);
            }
            if !d.is_empty() {
                let dash = if s.dashed {
                    r#" stroke-dasharray="6,3""#
                } else {
                    ""
                };
                let _ = writeln!(
                    out,
                    r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.4"{dash}/>"#
                );
            }
            let ly = py0 + 14.0 * (j as f64 + 1.0);
            let _ = writeln!(
                out,
                r#"<line x1="{0}" x2="{1}" y1="{2}" y2="{2}" stroke="{3}" stroke-width="2"/><text x="{4}" y="{2}" dy="4">{5}</text>"#,
                px1 + 8.0,
                px1 + 24.0,
                ly,
                color,
                px1 + 28.0,
                esc(&s.name)
            );
        }
        if k + 1 == panels.len() {
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                (px0 + px1) / 2.0,
                py1 + 30.0,
                esc(x_label)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
