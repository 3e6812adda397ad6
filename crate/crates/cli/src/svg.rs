//! Deterministic text SVG rendering of heatmaps and median-k profiles.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use emscope_core::detector::ScaleProfile;
use emscope_core::spectral::Matrix;

use crate::fsutil::write_atomic;

/// Perceptually ordered color stops, low to high.
const PALETTE: [[u8; 3]; 5] = [
    [0x44, 0x01, 0x54],
    [0x3b, 0x52, 0x8b],
    [0x21, 0x91, 0x8c],
    [0x5e, 0xc9, 0x62],
    [0xfd, 0xe7, 0x25],
];

const SERIES_COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}

/// Color for `t` in `[0, 1]`, linearly interpolated between palette stops.
pub fn color_at(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (PALETTE.len() - 1) as f64;
    let i = (pos.floor() as usize).min(PALETTE.len() - 2);
    let frac = pos - i as f64;
    let (a, b) = (PALETTE[i], PALETTE[i + 1]);
    let mix = |k: usize| (a[k] as f64 + (b[k] as f64 - a[k] as f64) * frac).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(0), mix(1), mix(2))
}

/// Labels and value ranges of the two heatmap axes. Matrix row 0 is drawn
/// at the top and column 0 at the left.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapAxes {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_range: (f64, f64),
    /// Value range of the rows, top to bottom.
    pub y_range: (f64, f64),
}

const HM_WIDTH: f64 = 720.0;
const HM_HEIGHT: f64 = 480.0;
const HM_LEFT: f64 = 90.0;
const HM_RIGHT: f64 = 40.0;
const HM_TOP: f64 = 50.0;
const HM_BOTTOM: f64 = 70.0;

pub fn heatmap_svg(matrix: &Matrix, axes: &HeatmapAxes, note: Option<&str>) -> String {
    let (rows, cols) = (matrix.rows(), matrix.cols());
    let plot_w = HM_WIDTH - HM_LEFT - HM_RIGHT;
    let plot_h = HM_HEIGHT - HM_TOP - HM_BOTTOM;
    let (lo, hi) = if rows * cols > 0 {
        (matrix.min(), matrix.max())
    } else {
        (0.0, 0.0)
    };
    let flat = !(hi > lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{HM_WIDTH}" height="{HM_HEIGHT}" viewBox="0 0 {HM_WIDTH} {HM_HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{HM_WIDTH}" height="{HM_HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        HM_WIDTH / 2.0,
        escape(&axes.title)
    );
    let _ = writeln!(s, r#"<g id="cells" shape-rendering="crispEdges">"#);
    if rows * cols > 0 {
        let cw = plot_w / cols as f64;
        let ch = plot_h / rows as f64;
        for r in 0..rows {
            for c in 0..cols {
                let t = if flat { 0.0 } else { (matrix.get(r, c) - lo) / (hi - lo) };
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
                    HM_LEFT + c as f64 * cw,
                    HM_TOP + r as f64 * ch,
                    cw,
                    ch,
                    color_at(t)
                );
            }
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r##"<rect x="{HM_LEFT}" y="{HM_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#333"/>"##
    );

    let bottom = HM_TOP + plot_h;
    let _ = writeln!(
        s,
        r#"<text x="{HM_LEFT}" y="{}" text-anchor="start">{}</text>"#,
        bottom + 16.0,
        fmt_tick(axes.x_range.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        HM_LEFT + plot_w,
        bottom + 16.0,
        fmt_tick(axes.x_range.1)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        HM_LEFT + plot_w / 2.0,
        bottom + 34.0,
        escape(&axes.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        HM_LEFT - 6.0,
        HM_TOP + 10.0,
        fmt_tick(axes.y_range.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        HM_LEFT - 6.0,
        bottom,
        fmt_tick(axes.y_range.1)
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">{}</text>"#,
        HM_TOP + plot_h / 2.0,
        HM_TOP + plot_h / 2.0,
        escape(&axes.y_label)
    );

    let legend_y = HEATMAP_LEGEND_Y;
    let _ = writeln!(
        s,
        r#"<rect x="{HM_LEFT}" y="{legend_y}" width="12" height="12" fill="{}"/><text x="{}" y="{}">min={}</text>"#,
        color_at(0.0),
        HM_LEFT + 16.0,
        legend_y + 10.0,
        fmt_value(lo)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{}" y="{legend_y}" width="12" height="12" fill="{}"/><text x="{}" y="{}">max={}</text>"#,
        HM_LEFT + 200.0,
        color_at(1.0),
        HM_LEFT + 216.0,
        legend_y + 10.0,
        fmt_value(hi)
    );
    let mut notes: Vec<&str> = Vec::new();
    if flat {
        notes.push("flat");
    }
    if let Some(n) = note {
        notes.push(n);
    }
    if !notes.is_empty() {
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" text-anchor="end" fill="#b00">{}</text>"##,
            HM_WIDTH - HM_RIGHT,
            legend_y + 10.0,
            escape(&notes.join("; "))
        );
    }
    s.push_str("</svg>\n");
    s
}

const HEATMAP_LEGEND_Y: f64 = HM_HEIGHT - 24.0;

pub fn render_heatmap_svg(
    matrix: &Matrix,
    axes: &HeatmapAxes,
    note: Option<&str>,
    out: &Path,
) -> io::Result<()> {
    write_atomic(out, heatmap_svg(matrix, axes, note).as_bytes())
}

/// One line of a profile chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn from_profile(profile: &ScaleProfile) -> Self {
        Series {
            label: profile.label.clone(),
            points: profile
                .windows
                .iter()
                .map(|w| (w.window_len as f64, w.median_k))
                .collect(),
        }
    }
}

const PR_WIDTH: f64 = 640.0;
const PR_HEIGHT: f64 = 420.0;
const PR_LEFT: f64 = 70.0;
const PR_RIGHT: f64 = 30.0;
const PR_TOP: f64 = 50.0;
const PR_BOTTOM: f64 = 60.0;

pub fn profile_svg(series: &[Series]) -> String {
    let plot_w = PR_WIDTH - PR_LEFT - PR_RIGHT;
    let plot_h = PR_HEIGHT - PR_TOP - PR_BOTTOM;
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x_lo, mut x_hi, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &(x, y) in all {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_hi = y_hi.max(y);
    }
    if !x_lo.is_finite() {
        x_lo = 0.0;
        x_hi = 1.0;
    }
    if x_hi <= x_lo {
        x_lo -= 1.0;
        x_hi += 1.0;
    }
    let y_top = (y_hi.ceil() + 1.0).max(2.0);
    let px = |x: f64| PR_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let py = |y: f64| PR_TOP + plot_h - y / y_top * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PR_WIDTH}" height="{PR_HEIGHT}" viewBox="0 0 {PR_WIDTH} {PR_HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{PR_WIDTH}" height="{PR_HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">Median selected components vs. STFT window length</text>"#,
        PR_WIDTH / 2.0
    );

    let bottom = PR_TOP + plot_h;
    let _ = writeln!(
        s,
        r##"<path d="M{PR_LEFT} {PR_TOP} V{bottom} H{}" fill="none" stroke="#333"/>"##,
        PR_LEFT + plot_w
    );
    let mut x_ticks: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    x_ticks.sort_by(f64::total_cmp);
    x_ticks.dedup();
    for x in x_ticks {
        let _ = writeln!(
            s,
            r##"<line x1="{0:.3}" y1="{bottom}" x2="{0:.3}" y2="{1}" stroke="#333"/><text x="{0:.3}" y="{2}" text-anchor="middle">{3}</text>"##,
            px(x),
            bottom + 5.0,
            bottom + 18.0,
            fmt_tick(x)
        );
    }
    for k in 0..=(y_top as usize) {
        let y = py(k as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.3}" x2="{PR_LEFT}" y2="{y:.3}" stroke="#333"/><line x1="{PR_LEFT}" y1="{y:.3}" x2="{}" y2="{y:.3}" stroke="#ddd"/><text x="{}" y="{:.3}" text-anchor="end">{k}</text>"##,
            PR_LEFT - 5.0,
            PR_LEFT + plot_w,
            PR_LEFT - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">STFT window length (samples)</text>"#,
        PR_LEFT + plot_w / 2.0,
        PR_HEIGHT - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">median k</text>"#,
        PR_TOP + plot_h / 2.0
    );

    for (i, ser) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let _ = writeln!(s, r#"<g class="series" data-label="{}">"#, escape(&ser.label));
        if ser.points.len() > 1 {
            let pts: Vec<String> = ser
                .points
                .iter()
                .map(|&(x, y)| format!("{:.3},{:.3}", px(x), py(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            );
        }
        for &(x, y) in &ser.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.3}" cy="{:.3}" r="4" fill="{color}"/>"#,
                px(x),
                py(y)
            );
        }
        let _ = writeln!(s, "</g>");
    }

    if series.len() > 1 {
        let _ = writeln!(s, r#"<g id="legend">"#);
        for (i, ser) in series.iter().enumerate() {
            let color = SERIES_COLORS[i % SERIES_COLORS.len()];
            let y = PR_TOP + 8.0 + 18.0 * i as f64;
            let x = PR_LEFT + plot_w - 150.0;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="12" height="12" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
                x + 18.0,
                y + 10.0,
                escape(&ser.label)
            );
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

pub fn render_profile_svg(profile: &ScaleProfile, out: &Path) -> io::Result<()> {
    write_atomic(out, profile_svg(&[Series::from_profile(profile)]).as_bytes())
}

pub fn render_profiles_svg(profiles: &[ScaleProfile], out: &Path) -> io::Result<()> {
    let series: Vec<Series> = profiles.iter().map(Series::from_profile).collect();
    write_atomic(out, profile_svg(&series).as_bytes())
}

fn fmt_tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e6 {
        format!("{v}")
    } else {
        format!("{v:.3e}")
    }
}

fn fmt_value(v: f64) -> String {
    format!("{v:.6e}")
}
