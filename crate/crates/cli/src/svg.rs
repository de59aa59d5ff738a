//! Hand-written SVG output.
//!
//! Heatmaps use viridis, linearly interpolated between eleven anchor colors
//! taken from matplotlib at t = 0, 0.1, ..., 1. The lowest value is dark
//! purple and the highest is yellow; a vertical legend bar to the right of
//! the grid shows the mapping with the minimum and maximum printed at its
//! ends. Non-finite cells are drawn grey. Every number is printed with a
//! fixed precision so identical inputs give identical bytes.

use std::fmt::Write as _;

const VIRIDIS: [(u8, u8, u8); 11] = [
    (0x44, 0x01, 0x54),
    (0x48, 0x24, 0x75),
    (0x41, 0x44, 0x87),
    (0x35, 0x5f, 0x8d),
    (0x2a, 0x78, 0x8e),
    (0x21, 0x91, 0x8c),
    (0x22, 0xa8, 0x84),
    (0x44, 0xbf, 0x70),
    (0x7a, 0xd1, 0x51),
    (0xbd, 0xdf, 0x26),
    (0xfd, 0xe7, 0x25),
];

const SERIES_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub fn viridis(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let lerp = |a: u8, b: u8| (a as f64 + f * (b as f64 - a as f64)).round() as u8;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    format!("#{:02x}{:02x}{:02x}", lerp(a.0, b.0), lerp(a.1, b.1), lerp(a.2, b.2))
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn label(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 1e-2 && v.abs() < 1e4) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

/// A grid of values; row 0 is drawn at the top.
#[derive(Clone, Debug, Default)]
pub struct Heatmap {
    pub title: String,
    pub values: Vec<Vec<f64>>,
    pub x_label: String,
    pub y_label: String,
    /// Tick labels under each column and beside each row; thinned when dense.
    pub x_ticks: Vec<String>,
    pub y_ticks: Vec<String>,
    /// Points drawn on top, in fractional `(column, row)` cell coordinates.
    pub markers: Vec<(f64, f64)>,
}

impl Heatmap {
    pub fn n_rows(&self) -> usize {
        self.values.len()
    }

    pub fn n_cols(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn range(&self) -> (f64, f64) {
        let finite = self.values.iter().flatten().copied().filter(|v| v.is_finite());
        finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }

    pub fn to_svg(&self) -> String {
        let (rows, cols) = (self.n_rows(), self.n_cols());
        let cell = (480.0 / cols.max(rows).max(1) as f64).clamp(2.0, 60.0);
        let (left, top) = (70.0, 40.0);
        let (grid_w, grid_h) = (cell * cols as f64, cell * rows as f64);
        let width = left + grid_w + 110.0;
        let height = top + grid_h + 60.0;
        let (lo, hi) = self.range();
        let span = if hi > lo { hi - lo } else { 1.0 };

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            left + grid_w / 2.0,
            escape(&self.title)
        );
        for (i, row) in self.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let fill = if v.is_finite() {
                    viridis((v - lo) / span)
                } else {
                    "#999999".to_string()
                };
                let _ = writeln!(
                    s,
                    r#"<rect class="cell" x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{fill}"><title>{}</title></rect>"#,
                    left + j as f64 * cell,
                    top + i as f64 * cell,
                    label(v)
                );
            }
        }
        for &(c, r) in &self.markers {
            let _ = writeln!(
                s,
                r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="2.5" fill="none" stroke="white" stroke-width="1"/>"#,
                left + c * cell,
                top + r * cell
            );
        }
        let every = |n: usize| (n / 10).max(1);
        for (j, t) in self.x_ticks.iter().enumerate().step_by(every(self.x_ticks.len())) {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                left + (j as f64 + 0.5) * cell,
                top + grid_h + 14.0,
                escape(t)
            );
        }
        for (i, t) in self.y_ticks.iter().enumerate().step_by(every(self.y_ticks.len())) {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
                left - 6.0,
                top + (i as f64 + 0.5) * cell,
                escape(t)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            left + grid_w / 2.0,
            top + grid_h + 34.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            top + grid_h / 2.0,
            top + grid_h / 2.0,
            escape(&self.y_label)
        );
        // Legend bar, maximum at the top.
        let (bar_x, steps) = (left + grid_w + 20.0, 50);
        let step_h = grid_h.max(100.0) / steps as f64;
        for k in 0..steps {
            let t = 1.0 - (k as f64 + 0.5) / steps as f64;
            let _ = writeln!(
                s,
                r#"<rect class="legend" x="{bar_x:.2}" y="{:.2}" width="14" height="{:.2}" fill="{}"/>"#,
                top + k as f64 * step_h,
                step_h + 0.05,
                viridis(t)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            bar_x + 18.0,
            top + 8.0,
            label(hi)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            bar_x + 18.0,
            top + steps as f64 * step_h,
            label(lo)
        );
        s.push_str("</svg>\n");
        s
    }
}

/// Line chart of several series over a shared x axis.
#[derive(Clone, Debug, Default)]
pub struct Curve {
    pub title: String,
    pub x_label: String,
    pub x: Vec<f64>,
    pub series: Vec<(String, Vec<f64>)>,
}

impl Curve {
    pub fn to_svg(&self) -> String {
        let (left, top, w, h) = (70.0, 40.0, 480.0, 300.0);
        let width = left + w + 140.0;
        let height = top + h + 60.0;
        let finite = |v: &f64| v.is_finite();
        let (x_lo, x_hi) = self
            .x
            .iter()
            .filter(|v| finite(v))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let (y_lo, y_hi) = self
            .series
            .iter()
            .flat_map(|(_, ys)| ys.iter())
            .filter(|v| finite(v))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let sx = if x_hi > x_lo { w / (x_hi - x_lo) } else { 0.0 };
        let sy = if y_hi > y_lo { h / (y_hi - y_lo) } else { 0.0 };
        let px = |x: f64| left + if sx > 0.0 { (x - x_lo) * sx } else { w / 2.0 };
        let py = |y: f64| top + h - if sy > 0.0 { (y - y_lo) * sy } else { h / 2.0 };

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            left + w / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{left:.1}" y="{top:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="black"/>"#
        );
        if x_lo.is_finite() {
            let _ = writeln!(
                s,
                r#"<text x="{left:.1}" y="{:.1}">{}</text>"#,
                top + h + 14.0,
                label(x_lo)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                left + w,
                top + h + 14.0,
                label(x_hi)
            );
        }
        if y_lo.is_finite() {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                left - 4.0,
                top + h,
                label(y_lo)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                left - 4.0,
                top + 8.0,
                label(y_hi)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            left + w / 2.0,
            top + h + 34.0,
            escape(&self.x_label)
        );
        for (k, (name, ys)) in self.series.iter().enumerate() {
            let color = SERIES_COLORS[k % SERIES_COLORS.len()];
            let points: Vec<String> = self
                .x
                .iter()
                .zip(ys)
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline class="series" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                points.join(" ")
            );
            let ly = top + 10.0 + 16.0 * k as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
                left + w + 12.0,
                left + w + 32.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
                left + w + 36.0,
                ly + 4.0,
                escape(name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}
