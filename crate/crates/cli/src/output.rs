//! Canonical CSV, JSON and SVG writers. Every file is written to a temporary
//! sibling and renamed into place.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use gamcast::{GamError, Result};
use serde::Serialize;

/// C-style `%.12g`.
pub fn fmt_g(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    const P: i32 = 12;
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= P {
        let mant = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mant}e{sign}{:02}", exp.abs())
    } else {
        trim_zeros(&format!("{:.*}", (P - 1 - exp) as usize, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_g).unwrap_or_default()
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| GamError::Io(e.error))?;
    Ok(())
}

/// Rows are pre-formatted cells.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| GamError::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| GamError::Numerical(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub enum Mark {
    Line,
    Bars,
    Points,
}

pub struct Series<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub mark: Mark,
    pub color: &'a str,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn extent<'a>(vals: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// A bare-bones static chart: frame, axis labels, and one mark per series.
pub fn svg_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (x0, x1) = extent(series.iter().flat_map(|s| s.x.iter()));
    let (mut y0, y1) = extent(series.iter().flat_map(|s| s.y.iter()));
    if series.iter().any(|s| matches!(s.mark, Mark::Bars)) {
        y0 = y0.min(0.0);
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>
<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>
<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>
<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>
<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>
<text x="{PAD}" y="{}" font-size="10">{}</text>
<text x="{}" y="{}" font-size="10" text-anchor="end">{}</text>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD,
        W / 2.0,
        escape(title),
        W / 2.0,
        H - 10.0,
        escape(xlabel),
        H / 2.0,
        H / 2.0,
        escape(ylabel),
        H - PAD + 14.0,
        fmt_g(x0),
        W - PAD,
        H - PAD + 14.0,
        fmt_g(x1),
    );
    for s in series {
        let pts = s.x.iter().zip(s.y).filter(|(x, y)| x.is_finite() && y.is_finite());
        match s.mark {
            Mark::Line => {
                let path: Vec<String> = pts.map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                let _ = writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                    s.color,
                    path.join(" ")
                );
            }
            Mark::Points => {
                for (&x, &y) in pts {
                    let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}"/>"#, sx(x), sy(y), s.color);
                }
            }
            Mark::Bars => {
                let bw = ((W - 2.0 * PAD) / s.x.len().max(1) as f64 * 0.8).max(0.5);
                for (&x, &y) in pts {
                    let top = sy(y.max(0.0));
                    let base = sy(y0.max(0.0).min(y.min(0.0)).max(y0));
                    let _ = writeln!(
                        out,
                        r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                        sx(x) - bw / 2.0,
                        top,
                        bw,
                        (base - top).abs(),
                        s.color
                    );
                }
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    write_atomic(path, svg.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_printf_g() {
        let cases = [
            (1.0, "1"),
            (0.1, "0.1"),
            (1.0 / 3.0, "0.333333333333"),
            (123456789012.0, "123456789012"),
            (1234567890123.0, "1.23456789012e+12"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-2.5, "-2.5"),
            (999999999999.5, "1e+12"),
            (0.0, "0"),
        ];
        for (x, s) in cases {
            assert_eq!(fmt_g(x), s, "{x}");
        }
        assert_eq!(fmt_opt(None), "");
    }

    #[test]
    fn round_trips_to_twelve_digits() {
        for x in [std::f64::consts::PI, 1e-300, 6.02214076e23, -17.8] {
            let back: f64 = fmt_g(x).parse().unwrap();
            assert!((back - x).abs() <= 1e-11 * x.abs());
        }
    }
}
