//! Static SVG charts: loss curves, FID against the confidence threshold,
//! and the precision/recall scatter.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Lines,
    Markers,
}

/// A single-axes chart; rendering is a pure function of its contents.
#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub style: Style,
    pub series: Vec<Series>,
    /// Horizontal reference lines drawn across the full width.
    pub hlines: Vec<(String, f64)>,
    /// Per-series crosshairs at `(x, y)`.
    pub crosshairs: Vec<(usize, f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str, style: Style) -> Self {
        Chart {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            style,
            series: Vec::new(),
            hlines: Vec::new(),
            crosshairs: Vec::new(),
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let xs = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
        let ys = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .chain(self.hlines.iter().map(|h| h.1));
        let finite = |it: &mut dyn Iterator<Item = f64>| {
            it.filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (mut x0, mut x1) = finite(&mut xs.into_iter());
        let (mut y0, mut y1) = finite(&mut ys.into_iter());
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if !y0.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        if x1 - x0 <= 0.0 {
            (x0, x1) = (x0 - 0.5, x1 + 0.5);
        }
        if y1 - y0 <= 0.0 {
            (y0, y1) = (y0 - 0.5, y1 + 0.5);
        }
        let pad = 0.05 * (y1 - y0);
        (x0, x1, y0 - pad, y1 + pad)
    }

    pub fn to_svg(&self) -> String {
        let (x0, x1, y0, y1) = self.bounds();
        let pw = W - MARGIN_L - MARGIN_R;
        let ph = H - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_T + ph - (y - y0) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            MARGIN_L + pw / 2.0,
            esc(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(xv),
                MARGIN_T + ph + 18.0,
                fmt_tick(xv)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                MARGIN_L - 6.0,
                sy(yv) + 4.0,
                fmt_tick(yv)
            );
            let _ = writeln!(
                s,
                r##"<line x1="{MARGIN_L}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#dddddd"/>"##,
                MARGIN_L + pw,
                sy(yv),
                sy(yv)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_L + pw / 2.0,
            H - 12.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            MARGIN_T + ph / 2.0,
            MARGIN_T + ph / 2.0,
            esc(&self.y_label)
        );

        let n_series = self.series.len();
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64)> = series
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|&(x, y)| (sx(x), sy(y)))
                .collect();
            match self.style {
                Style::Lines => {
                    let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                        path.join(" ")
                    );
                    if pts.len() == 1 {
                        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"#, pts[0].0, pts[0].1);
                    }
                }
                Style::Markers => {
                    for (x, y) in &pts {
                        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3.5" fill="{color}" fill-opacity="0.7"/>"#);
                    }
                }
            }
            let ly = MARGIN_T + 14.0 + 18.0 * i as f64;
            let lx = MARGIN_L + pw + 12.0;
            let _ = writeln!(
                s,
                r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="4" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                ly - 4.0,
                lx + 18.0,
                ly + 2.0,
                esc(&series.name)
            );
        }
        for (j, (name, y)) in self.hlines.iter().enumerate() {
            let color = PALETTE[(n_series + j) % PALETTE.len()];
            let _ = writeln!(
                s,
                r#"<line x1="{MARGIN_L}" x2="{:.1}" y1="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
                MARGIN_L + pw,
                sy(*y),
                sy(*y)
            );
            let ly = MARGIN_T + 14.0 + 18.0 * (n_series + j) as f64;
            let lx = MARGIN_L + pw + 12.0;
            let _ = writeln!(
                s,
                r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="4" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                ly - 4.0,
                lx + 18.0,
                ly + 2.0,
                esc(name)
            );
        }
        for &(i, x, y) in &self.crosshairs {
            let color = PALETTE[i % PALETTE.len()];
            let _ = writeln!(
                s,
                r#"<line x1="{MARGIN_L}" x2="{:.1}" y1="{:.2}" y2="{:.2}" stroke="{color}" stroke-dasharray="2 3"/>"#,
                MARGIN_L + pw,
                sy(y),
                sy(y)
            );
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" x2="{:.2}" y1="{MARGIN_T}" y2="{:.1}" stroke="{color}" stroke-dasharray="2 3"/>"#,
                sx(x),
                sx(x),
                MARGIN_T + ph
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Chart {
        let mut c = Chart::new("t", "x", "y", Style::Lines);
        c.series.push(Series {
            name: "a<b".into(),
            points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, f64::NAN)],
        });
        c.hlines.push(("flat".into(), 1.5));
        c
    }

    #[test]
    fn rendering_is_deterministic_and_escaped() {
        let a = sample().to_svg();
        assert_eq!(a, sample().to_svg());
        assert!(a.contains("a&lt;b"));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert!(!a.contains("NaN"));
    }

    #[test]
    fn degenerate_ranges_render() {
        let mut c = Chart::new("t", "x", "y", Style::Markers);
        c.series.push(Series {
            name: "p".into(),
            points: vec![(0.5, 0.5)],
        });
        assert!(c.to_svg().contains("<circle"));
    }
}
