//! Minimal deterministic SVG line plots.

use std::fmt::Write;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 44.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Extra segments drawn in grey, e.g. the gap outline.
    pub marks: Vec<((f64, f64), (f64, f64))>,
    pub log_y: bool,
}

impl Panel {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
            marks: Vec::new(),
            log_y: false,
        }
    }

    fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let ty = |y: f64| if self.log_y { y.log10() } else { y };
        let pts = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .chain(self.marks.iter().flat_map(|(a, b)| [*a, *b]))
            .filter(|(x, y)| x.is_finite() && ty(*y).is_finite())
            .map(|(x, y)| (x, ty(y)));
        let mut b: Option<(f64, f64, f64, f64)> = None;
        for (x, y) in pts {
            b = Some(match b {
                None => (x, x, y, y),
                Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
            });
        }
        b.map(|(x0, x1, y0, y1)| {
            let pad = |lo: f64, hi: f64| if hi - lo < 1e-9 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
            let (x0, x1) = pad(x0, x1);
            let (y0, y1) = pad(y0, y1);
            (x0, x1, y0, y1)
        })
    }

    fn render(&self, out: &mut String, ox: f64) {
        let (x0, x1, y0, y1) = self.bounds().unwrap_or((0.0, 1.0, 0.0, 1.0));
        let (w, h) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
        let ty = |y: f64| if self.log_y { y.log10() } else { y };
        let sx = |x: f64| ox + MARGIN + (x - x0) / (x1 - x0) * w;
        let sy = |y: f64| MARGIN + (1.0 - (ty(y) - y0) / (y1 - y0)) * h;
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{MARGIN:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="#444"/>"##,
            ox + MARGIN
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{}</text>"#,
            ox + PANEL_W / 2.0,
            MARGIN - 14.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">{}</text>"#,
            ox + PANEL_W / 2.0,
            PANEL_H - 8.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" transform="rotate(-90 {:.2} {:.2})" text-anchor="middle">{}</text>"#,
            ox + 12.0,
            PANEL_H / 2.0,
            ox + 12.0,
            PANEL_H / 2.0,
            escape(&self.y_label)
        );
        let fmt_y = |v: f64| if self.log_y { format!("1e{v:.1}") } else { format!("{v:.3}") };
        for (val, anchor, x, y) in [
            (format!("{x0:.3}"), "start", ox + MARGIN, MARGIN + h + 14.0),
            (format!("{x1:.3}"), "end", ox + MARGIN + w, MARGIN + h + 14.0),
            (fmt_y(y0), "end", ox + MARGIN - 4.0, MARGIN + h),
            (fmt_y(y1), "end", ox + MARGIN - 4.0, MARGIN + 10.0),
        ] {
            let _ = writeln!(out, r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-size="10">{val}</text>"#);
        }
        for ((ax, ay), (bx, by)) in &self.marks {
            let _ = writeln!(
                out,
                r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999" stroke-width="2"/>"##,
                sx(*ax),
                sy(*ay),
                sx(*bx),
                sy(*by)
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && ty(*y).is_finite())
                .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="10" fill="{color}">{}</text>"#,
                ox + MARGIN + 6.0,
                MARGIN + 14.0 + 12.0 * i as f64,
                escape(&s.label)
            );
        }
    }
}

/// Panels side by side. `comment` is embedded verbatim (provenance).
pub fn render(panels: &[Panel], comment: &str) -> String {
    let width = PANEL_W * panels.len().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}">"#
    );
    let _ = writeln!(out, "<!-- {} -->", comment.replace("--", "- -"));
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        p.render(&mut out, i as f64 * PANEL_W);
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel() -> Panel {
        let mut p = Panel::new("path", "x [m]", "z [m]");
        p.series.push(Series { label: "run".into(), points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, 1.5)] });
        p
    }

    #[test]
    fn output_is_deterministic_and_well_formed() {
        let a = render(&[panel(), panel()], "seed 1");
        assert_eq!(a, render(&[panel(), panel()], "seed 1"));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains("<!-- seed 1 -->"));
    }

    #[test]
    fn log_axis_skips_non_positive_values() {
        let mut p = Panel::new("loss", "epoch", "loss");
        p.log_y = true;
        p.series.push(Series { label: "A".into(), points: vec![(1.0, 100.0), (2.0, 0.0), (3.0, 10.0)] });
        let s = render(&[p], "");
        let line = s.lines().find(|l| l.starts_with("<polyline")).unwrap();
        assert_eq!(line.matches(',').count(), 2);
    }

    #[test]
    fn degenerate_ranges_do_not_divide_by_zero() {
        let mut p = Panel::new("flat", "t", "y");
        p.series.push(Series { label: "c".into(), points: vec![(1.0, 3.0), (1.0, 3.0)] });
        assert!(!render(&[p], "").contains("NaN"));
    }
}
