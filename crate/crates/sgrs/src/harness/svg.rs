//! Minimal SVG charts for ablation tables and training curves. Output is
//! deterministic: fixed canvas, fixed palette, values printed with `{:.4}`.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

const PALETTE: [&str; 7] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn document(body: &str, title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\" font-family=\"monospace\" font-size=\"12\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{cx}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{t}</text>\n",
            "{body}</svg>\n"
        ),
        w = WIDTH,
        h = HEIGHT,
        cx = WIDTH / 2.0,
        t = escape(title),
        body = body,
    )
}

/// Y range padded away from the data so lines do not hug the frame.
fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.08;
    (lo - pad, hi + pad)
}

fn axes(body: &mut String, y_lo: f64, y_hi: f64) {
    let x0 = LEFT;
    let x1 = WIDTH - RIGHT;
    let y0 = HEIGHT - BOTTOM;
    let y1 = TOP;
    let _ = write!(
        body,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let v = y_lo + f * (y_hi - y_lo);
        let y = y0 - f * (y0 - y1);
        let _ = write!(
            body,
            "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{x1}\" y2=\"{y}\" stroke=\"#dddddd\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.4}</text>\n",
            x0 - 6.0,
            y + 4.0
        );
    }
}

/// Vertical bars with one label and one value each.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> String {
    assert_eq!(labels.len(), values.len());
    let (lo, hi) = y_range(values.iter().copied().chain(std::iter::once(0.0)));
    let mut body = String::new();
    axes(&mut body, lo, hi);
    let n = values.len().max(1) as f64;
    let span = WIDTH - LEFT - RIGHT;
    let slot = span / n;
    let bar = slot * 0.6;
    let y0 = HEIGHT - BOTTOM;
    let scale = (y0 - TOP) / (hi - lo);
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = LEFT + i as f64 * slot + (slot - bar) / 2.0;
        let zero = y0 - (0.0f64.max(lo) - lo) * scale;
        let top = y0 - (v - lo) * scale;
        let (y, h) = if top < zero { (top, zero - top) } else { (zero, top - zero) };
        let color = PALETTE[i % PALETTE.len()];
        let _ = write!(
            body,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar:.1}\" height=\"{h:.1}\" fill=\"{color}\"/>\n\
             <text x=\"{cx:.1}\" y=\"{ty:.1}\" text-anchor=\"middle\">{val:.4}</text>\n\
             <text x=\"{cx:.1}\" y=\"{ly:.1}\" text-anchor=\"middle\">{lab}</text>\n",
            cx = x + bar / 2.0,
            ty = y - 4.0,
            ly = HEIGHT - BOTTOM + 16.0,
            val = v,
            lab = escape(label),
        );
    }
    document(&body, title)
}

/// One polyline per named series, with a legend in the top-right corner.
pub fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (y_lo, y_hi) = y_range(series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.1)));
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    for (_, pts) in series {
        for &(x, _) in pts {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
        }
    }
    if !x_lo.is_finite() || x_hi - x_lo < 1e-12 {
        x_lo = 0.0;
        x_hi = 1.0;
    }
    let mut body = String::new();
    axes(&mut body, y_lo, y_hi);
    let y0 = HEIGHT - BOTTOM;
    let sx = (WIDTH - LEFT - RIGHT) / (x_hi - x_lo);
    let sy = (y0 - TOP) / (y_hi - y_lo);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let v = x_lo + f * (x_hi - x_lo);
        let x = LEFT + f * (WIDTH - LEFT - RIGHT);
        let _ = write!(
            body,
            "<text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\">{v:.4}</text>\n",
            y0 + 16.0
        );
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut path = String::new();
        for &(x, y) in pts {
            if !y.is_finite() {
                continue;
            }
            let px = LEFT + (x - x_lo) * sx;
            let py = y0 - (y - y_lo) * sy;
            let _ = write!(path, "{px:.1},{py:.1} ");
        }
        let _ = write!(
            body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.trim_end()
        );
        let ly = TOP + 14.0 * i as f64;
        let _ = write!(
            body,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\">{}</text>\n",
            WIDTH - RIGHT - 130.0,
            ly,
            WIDTH - RIGHT - 115.0,
            ly + 9.0,
            escape(name),
        );
    }
    document(&body, title)
}

/// Stacks complete charts vertically into one document (nested `<svg>`
/// elements keep their own coordinate systems).
pub fn stack(charts: &[String]) -> String {
    let total = HEIGHT * charts.len().max(1) as f64;
    let mut body = String::new();
    for (i, chart) in charts.iter().enumerate() {
        let y = i as f64 * HEIGHT;
        body.push_str(&chart.replacen("<svg ", &format!("<svg y=\"{y}\" "), 1));
    }
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{total}\" \
         viewBox=\"0 0 {WIDTH} {total}\">\n{body}</svg>\n"
    )
}
