//! Minimal deterministic SVG line/scatter charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub struct SeriesPoint {
    pub x: f64,
    pub y: f64,
    /// Drawn next to the marker when set.
    pub label: Option<String>,
    pub tooltip: String,
}

pub struct Series {
    pub name: String,
    pub points: Vec<SeriesPoint>,
}

/// Extra polyline drawn beneath the series, e.g. a frontier.
pub struct Overlay {
    pub class: String,
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub overlays: Vec<Overlay>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn tick(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

impl Chart {
    pub fn render(&self) -> String {
        let all = || {
            self.series
                .iter()
                .flat_map(|s| s.points.iter().map(|p| (p.x, p.y)))
                .chain(self.overlays.iter().flat_map(|o| o.points.iter().copied()))
        };
        let (x0, x1) = range(all().map(|p| p.0));
        let (y0, y1) = range(all().map(|p| p.1));
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

        let mut o = String::new();
        let _ = writeln!(
            o,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(o, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            o,
            r#"<text x="{:.1}" y="22" font-size="14" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            esc(&self.title)
        );
        let _ = writeln!(
            o,
            r#"<g class="axes" stroke="black"><line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}"/></g>"#,
            TOP + ph,
            LEFT + pw,
            TOP + ph,
            TOP + ph
        );
        for i in 0..=4 {
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            let _ = writeln!(
                o,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(fx),
                TOP + ph + 16.0,
                tick(fx)
            );
            let _ = writeln!(
                o,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                LEFT - 6.0,
                sy(fy) + 4.0,
                tick(fy)
            );
        }
        let _ = writeln!(
            o,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 14.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            o,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            esc(&self.y_label)
        );

        for ov in &self.overlays {
            let pts: Vec<String> = ov
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                o,
                r##"<polyline class="{}" data-series="{}" points="{}" fill="none" stroke="#888" stroke-dasharray="4 3"/>"##,
                esc(&ov.class),
                esc(&ov.name),
                pts.join(" ")
            );
        }
        for (k, s) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let _ = writeln!(
                o,
                r#"<g class="series" data-series="{}" stroke="{color}" fill="{color}">"#,
                esc(&s.name)
            );
            let mut pts: Vec<&SeriesPoint> = s.points.iter().collect();
            pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
            if pts.len() > 1 {
                let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.y))).collect();
                let _ = writeln!(o, r#"<polyline points="{}" fill="none"/>"#, line.join(" "));
            }
            for p in &pts {
                let _ = writeln!(
                    o,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3.5"><title>{}</title></circle>"#,
                    sx(p.x),
                    sy(p.y),
                    esc(&p.tooltip)
                );
                if let Some(l) = &p.label {
                    let _ = writeln!(
                        o,
                        r#"<text x="{:.2}" y="{:.2}" stroke="none">{}</text>"#,
                        sx(p.x) + 6.0,
                        sy(p.y) - 6.0,
                        esc(l)
                    );
                }
            }
            let ly = TOP + 14.0 * k as f64;
            let _ = writeln!(
                o,
                r#"<rect x="{:.1}" y="{:.1}" width="10" height="10"/><text x="{:.1}" y="{:.1}" stroke="none" fill="black">{}</text>"#,
                W - RIGHT + 16.0,
                ly,
                W - RIGHT + 30.0,
                ly + 9.0,
                esc(&s.name)
            );
            let _ = writeln!(o, "</g>");
        }
        o.push_str("</svg>\n");
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_and_counts_series() {
        let chart = Chart {
            title: "a < b".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![
                Series {
                    name: "m/rtn".into(),
                    points: vec![SeriesPoint {
                        x: 1.0,
                        y: 2.0,
                        label: None,
                        tooltip: "t".into(),
                    }],
                },
                Series {
                    name: "m/gptq".into(),
                    points: vec![],
                },
            ],
            overlays: vec![],
        };
        let svg = chart.render();
        assert!(svg.contains("a &lt; b"));
        assert_eq!(svg.matches(r#"class="series""#).count(), 2);
        assert_eq!(svg, chart.render());
    }
}
