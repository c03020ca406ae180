use std::fmt::Write as _;
use std::path::Path;

use super::report::Curve;
use crate::{MipaeError, Result};

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Renders labelled curves (mean line plus a one-std band) against the
/// 1-based prediction step as a standalone SVG document.
pub fn curves_svg(title: &str, y_label: &str, series: &[(&str, &Curve)]) -> String {
    let n = series.iter().map(|(_, c)| c.mean.len()).max().unwrap_or(0).max(2);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, c) in series {
        for (m, s) in c.mean.iter().zip(&c.std) {
            lo = lo.min(m - s);
            hi = hi.max(m + s);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (n - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{PAD},{PAD} L{PAD},{b} L{r},{b}" fill="none" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for i in 0..n {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, x(i), H - PAD + 14.0, i + 1);
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, PAD - 4.0, y(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">time step</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (j, (name, c)) in series.iter().enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        let upper: Vec<String> = (0..c.mean.len()).map(|i| format!("{:.2},{:.2}", x(i), y(c.mean[i] + c.std[i]))).collect();
        let lower: Vec<String> = (0..c.mean.len()).rev().map(|i| format!("{:.2},{:.2}", x(i), y(c.mean[i] - c.std[i]))).collect();
        let _ = writeln!(s, r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#, upper.join(" "), lower.join(" "));
        let line: Vec<String> = (0..c.mean.len()).map(|i| format!("{:.2},{:.2}", x(i), y(c.mean[i]))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let ly = PAD + 14.0 * j as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#, W - PAD, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(v: &str) -> String {
    v.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| MipaeError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_one_polyline_per_series() {
        let a = Curve { mean: vec![0.9, 0.8, 0.7], std: vec![0.01, 0.02, 0.03] };
        let b = Curve { mean: vec![0.5, 0.5, 0.5], std: vec![0.0; 3] };
        let svg = curves_svg("SSIM", "ssim", &[("mipae", &a), ("copy <last>", &b)]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("copy &lt;last&gt;"));
    }
}
