//! Minimal SVG line charts: axes, ticks, polylines, a legend, and an optional
//! second y axis. Output is deterministic text.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 70.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
    pub dashed: bool,
    /// Plot against the right-hand axis.
    pub right_axis: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Label of the right-hand axis; the axis is drawn only if some series uses it.
    pub y2_label: Option<String>,
    pub series: Vec<Series>,
    /// Fix both axes to [0, 1] and draw the chance diagonal.
    pub unit_square: bool,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
struct Range1 {
    lo: f64,
    hi: f64,
}

impl Range1 {
    fn of<'a>(vals: impl Iterator<Item = &'a f64>) -> Option<Range1> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in vals.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            return None;
        }
        if hi - lo < 1e-12 {
            let pad = if lo.abs() > 0.0 { lo.abs() * 0.1 } else { 1.0 };
            return Some(Range1 { lo: lo - pad, hi: hi + pad });
        }
        Some(Range1 { lo, hi })
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e5).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Plot {
    pub fn render(&self) -> String {
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let all = |right: bool, axis: usize| -> Vec<f64> {
            self.series
                .iter()
                .filter(|s| s.right_axis == right)
                .flat_map(|s| s.points.iter().map(move |p| if axis == 0 { p.0 } else { p.1 }))
                .collect()
        };
        let unit = Range1 { lo: 0.0, hi: 1.0 };
        let (xr, yr, y2r) = if self.unit_square {
            (Some(unit), Some(unit), None)
        } else {
            let mut xs = all(false, 0);
            xs.extend(all(true, 0));
            (
                Range1::of(xs.iter()),
                Range1::of(all(false, 1).iter()),
                Range1::of(all(true, 1).iter()),
            )
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            W / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let px = |r: &Range1, v: f64| LEFT + r.frac(v) * pw;
        let py = |r: &Range1, v: f64| TOP + (1.0 - r.frac(v)) * ph;

        if let Some(xr) = &xr {
            for k in 0..=4 {
                let v = xr.lo + (xr.hi - xr.lo) * k as f64 / 4.0;
                let x = px(xr, v);
                let _ = writeln!(
                    s,
                    r#"<line x1="{x:.2}" y1="{b:.2}" x2="{x:.2}" y2="{b2:.2}" stroke="black"/><text x="{x:.2}" y="{t:.2}" text-anchor="middle">{}</text>"#,
                    tick_label(v),
                    b = TOP + ph,
                    b2 = TOP + ph + 5.0,
                    t = TOP + ph + 18.0
                );
            }
        }
        for (r, right) in [(&yr, false), (&y2r, true)] {
            let Some(r) = r else { continue };
            for k in 0..=4 {
                let v = r.lo + (r.hi - r.lo) * k as f64 / 4.0;
                let y = py(r, v);
                let (x0, x1, tx, anchor) = if right {
                    (LEFT + pw, LEFT + pw + 5.0, LEFT + pw + 8.0, "start")
                } else {
                    (LEFT - 5.0, LEFT, LEFT - 8.0, "end")
                };
                let _ = writeln!(
                    s,
                    r#"<line x1="{x0:.2}" y1="{y:.2}" x2="{x1:.2}" y2="{y:.2}" stroke="black"/><text x="{tx:.2}" y="{:.2}" text-anchor="{anchor}">{}</text>"#,
                    y + 4.0,
                    tick_label(v)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 20.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{y}" text-anchor="middle" transform="rotate(-90 18 {y})">{}</text>"#,
            escape(&self.y_label),
            y = TOP + ph / 2.0
        );
        if let (Some(label), Some(_)) = (&self.y2_label, &y2r) {
            let x = W - 14.0;
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{y}" text-anchor="middle" transform="rotate(90 {x} {y})">{}</text>"#,
                escape(label),
                y = TOP + ph / 2.0
            );
        }
        if self.unit_square {
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{}" x2="{}" y2="{TOP}" stroke="#999999" stroke-dasharray="4 4"/>"##,
                TOP + ph,
                LEFT + pw
            );
        }
        for series in &self.series {
            let r = if series.right_axis { &y2r } else { &yr };
            let (Some(xr), Some(r)) = (&xr, r) else { continue };
            let pts: Vec<String> = series
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", px(xr, x), py(r, y)))
                .collect();
            if pts.is_empty() {
                continue;
            }
            let dash = if series.dashed { r#" stroke-dasharray="6 3""# } else { "" };
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5"{dash} points="{}"/>"#,
                series.color,
                pts.join(" ")
            );
        }
        for (i, series) in self.series.iter().enumerate() {
            let y = TOP + 14.0 + 16.0 * i as f64;
            let x = LEFT + 10.0;
            let dash = if series.dashed { r#" stroke-dasharray="6 3""# } else { "" };
            let _ = writeln!(
                s,
                r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"{dash}/><text x="{}" y="{}">{}</text>"#,
                x + 20.0,
                series.color,
                x + 26.0,
                y + 4.0,
                escape(&series.name)
            );
        }
        for (i, note) in self.notes.iter().enumerate() {
            let _ = writeln!(
                s,
                r##"<text x="{}" y="{}" text-anchor="end" fill="#555555">{}</text>"##,
                LEFT + pw - 6.0,
                TOP + ph - 8.0 - 16.0 * i as f64,
                escape(note)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}
