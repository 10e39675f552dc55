//! Minimal standalone SVG line and scatter plots.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 56.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    Line,
    DashedLine,
    Points,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub color: &'static str,
    pub mark: Mark,
}

/// Shaded region between `lo` and `hi`.
#[derive(Debug, Clone)]
pub struct Band {
    pub name: String,
    pub x: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub color: &'static str,
}

#[derive(Debug, Clone, Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub bands: Vec<Band>,
    pub series: Vec<Series>,
    /// Horizontal reference lines, drawn dotted.
    pub hlines: Vec<f64>,
}

pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }
    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

/// Tick positions at a 1, 2 or 5 multiple of a power of ten.
pub fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw = (hi - lo) / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn label(v: f64) -> String {
    let s = format!("{:.4}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Plot {
    fn frame(&self) -> Frame {
        let mut xs = Vec::new();
        let mut ys = self.hlines.clone();
        for s in &self.series {
            xs.extend(&s.x);
            ys.extend(&s.y);
        }
        for b in &self.bands {
            xs.extend(&b.x);
            ys.extend(&b.lo);
            ys.extend(&b.hi);
        }
        let finite = |v: &Vec<f64>| -> (f64, f64) {
            let it = v.iter().copied().filter(|x| x.is_finite());
            let lo = it.clone().fold(f64::INFINITY, f64::min);
            let hi = it.fold(f64::NEG_INFINITY, f64::max);
            if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) }
        };
        let (x0, x1) = finite(&xs);
        let (y0, y1) = finite(&ys);
        let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 0.5, x0 + 0.5) };
        let pad = if y1 > y0 { 0.05 * (y1 - y0) } else { 0.5 };
        Frame {
            x0,
            x1,
            y0: y0 - pad,
            y1: y1 + pad,
        }
    }

    pub fn render(&self) -> String {
        let f = self.frame();
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let (left, right) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
        let (top, bottom) = (MARGIN_TOP, HEIGHT - MARGIN_BOTTOM);

        for t in nice_ticks(f.y0, f.y1, 6) {
            let y = f.py(t);
            let _ = writeln!(
                out,
                r##"<line x1="{left:.1}" y1="{y:.1}" x2="{right:.1}" y2="{y:.1}" stroke="#e5e5e5"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
                left - 6.0,
                y + 4.0,
                label(t)
            );
        }
        for t in nice_ticks(f.x0, f.x1, 8) {
            let x = f.px(t);
            let _ = writeln!(
                out,
                r##"<line x1="{x:.1}" y1="{bottom:.1}" x2="{x:.1}" y2="{:.1}" stroke="#333"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
                bottom + 5.0,
                bottom + 18.0,
                label(t)
            );
        }

        for b in &self.bands {
            let mut pts: Vec<String> = Vec::new();
            for (x, y) in b.x.iter().zip(&b.hi) {
                pts.push(format!("{:.2},{:.2}", f.px(*x), f.py(*y)));
            }
            for (x, y) in b.x.iter().zip(&b.lo).rev() {
                pts.push(format!("{:.2},{:.2}", f.px(*x), f.py(*y)));
            }
            let _ = writeln!(
                out,
                r#"<polygon points="{}" fill="{}" fill-opacity="0.25" stroke="none"/>"#,
                pts.join(" "),
                b.color
            );
        }
        for &h in &self.hlines {
            let y = f.py(h);
            let _ = writeln!(
                out,
                r##"<line x1="{left:.1}" y1="{y:.1}" x2="{right:.1}" y2="{y:.1}" stroke="#555" stroke-dasharray="2,3"/>"##
            );
        }
        for s in &self.series {
            match s.mark {
                Mark::Points => {
                    for (x, y) in s.x.iter().zip(&s.y).filter(|(_, y)| y.is_finite()) {
                        let _ = writeln!(
                            out,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{}"/>"#,
                            f.px(*x),
                            f.py(*y),
                            s.color
                        );
                    }
                }
                Mark::Line | Mark::DashedLine => {
                    let pts: Vec<String> = s
                        .x
                        .iter()
                        .zip(&s.y)
                        .filter(|(_, y)| y.is_finite())
                        .map(|(x, y)| format!("{:.2},{:.2}", f.px(*x), f.py(*y)))
                        .collect();
                    let dash = if s.mark == Mark::DashedLine { r#" stroke-dasharray="6,4""# } else { "" };
                    let _ = writeln!(
                        out,
                        r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"{dash}/>"#,
                        pts.join(" "),
                        s.color
                    );
                }
            }
        }

        let _ = writeln!(
            out,
            r##"<rect x="{left:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#333"/>"##,
            right - left,
            bottom - top
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="15">{}</text>"#,
            (left + right) / 2.0,
            top - 14.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (left + right) / 2.0,
            HEIGHT - 14.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text transform="translate(18,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (top + bottom) / 2.0,
            escape(&self.y_label)
        );

        let mut ly = top + 10.0;
        let lx = right + 14.0;
        for b in &self.bands {
            let _ = writeln!(
                out,
                r#"<rect x="{lx:.1}" y="{:.1}" width="18" height="10" fill="{}" fill-opacity="0.25"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                ly - 8.0,
                b.color,
                lx + 24.0,
                ly + 1.0,
                escape(&b.name)
            );
            ly += 18.0;
        }
        for s in &self.series {
            let key = match s.mark {
                Mark::Points => format!(r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{}"/>"#, lx + 9.0, ly - 3.0, s.color),
                Mark::Line => format!(
                    r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{}" stroke-width="2"/>"#,
                    ly - 3.0,
                    lx + 18.0,
                    ly - 3.0,
                    s.color
                ),
                Mark::DashedLine => format!(
                    r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{}" stroke-width="2" stroke-dasharray="6,4"/>"#,
                    ly - 3.0,
                    lx + 18.0,
                    ly - 3.0,
                    s.color
                ),
            };
            let _ = writeln!(out, r#"{key}<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 24.0, ly + 1.0, escape(&s.name));
            ly += 18.0;
        }
        out.push_str("</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round_and_inside() {
        assert_eq!(nice_ticks(0.0, 1.0, 5), vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]);
        let t = nice_ticks(-0.37, 2.61, 6);
        assert!(t.iter().all(|v| *v >= -0.37 && *v <= 2.61));
        assert_eq!(t.len(), 6);
        assert_eq!(nice_ticks(1.0, 1.0, 5), vec![1.0]);
    }

    #[test]
    fn renders_every_element() {
        let plot = Plot {
            title: "a < b".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            bands: vec![Band {
                name: "band".into(),
                x: vec![0.0, 1.0],
                lo: vec![-1.0, -1.0],
                hi: vec![1.0, 2.0],
                color: PALETTE[0],
            }],
            series: vec![
                Series {
                    name: "line".into(),
                    x: vec![0.0, 1.0],
                    y: vec![0.0, 1.0],
                    color: PALETTE[1],
                    mark: Mark::Line,
                },
                Series {
                    name: "pts".into(),
                    x: vec![0.5],
                    y: vec![f64::NAN],
                    color: PALETTE[2],
                    mark: Mark::Points,
                },
            ],
            hlines: vec![0.0],
        };
        let svg = plot.render();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("<polygon") && svg.contains("<polyline"));
        assert!(svg.contains("a &lt; b"));
        assert!(!svg.contains("NaN"));
    }
}
