//! Minimal self-contained SVG line charts.
//!
//! Emits a single well-formed `<svg>` document: axes with tick labels, grid
//! lines, one polyline per series, optional shaded min/max bands, and a
//! legend. No external stylesheets or scripts.

/// One curve. `band` entries are `(x, low, high)` and render as a translucent
/// ribbon under the line.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub band: Option<Vec<(f64, f64, f64)>>,
}

#[derive(Debug, Clone)]
pub struct ChartSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Small print under the title, used for the config hash.
    pub footnote: String,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 460.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 48.0;
const MARGIN_BOTTOM: f64 = 52.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1000.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.4}").trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.5}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Range {
    min: f64,
    max: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Range {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in values {
            if v.is_finite() {
                min = min.min(v);
                max = max.max(v);
            }
        }
        if !min.is_finite() {
            return Range { min: 0.0, max: 1.0 };
        }
        if min == max {
            // Degenerate span: pad so the line is visible.
            let pad = if min == 0.0 { 1.0 } else { min.abs() * 0.1 };
            return Range { min: min - pad, max: max + pad };
        }
        let pad = (max - min) * 0.05;
        // Non-negative data (counts, error rates) anchors at zero.
        let lo = if min >= 0.0 { 0.0 } else { min - pad };
        Range { min: lo, max: max + pad }
    }

    fn scale(&self, v: f64, lo_px: f64, hi_px: f64) -> f64 {
        lo_px + (v - self.min) / (self.max - self.min) * (hi_px - lo_px)
    }
}

/// Renders the chart; the output is a complete standalone SVG document.
pub fn line_chart(spec: &ChartSpec, series: &[Series]) -> String {
    let xr = Range::of(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yr = Range::of(series.iter().flat_map(|s| {
        s.points
            .iter()
            .map(|p| p.1)
            .chain(s.band.iter().flatten().flat_map(|b| [b.1, b.2]))
    }));

    let plot_left = MARGIN_LEFT;
    let plot_right = WIDTH - MARGIN_RIGHT;
    let plot_top = MARGIN_TOP;
    let plot_bottom = HEIGHT - MARGIN_BOTTOM;

    let x_px = |v: f64| xr.scale(v, plot_left, plot_right);
    let y_px = |v: f64| yr.scale(v, plot_bottom, plot_top);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    out.push_str(&format!("<!-- {} -->\n", escape(&spec.footnote)));
    out.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"22\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        (plot_left + plot_right) / 2.0,
        escape(&spec.title)
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"38\" font-size=\"9\" fill=\"#888\" text-anchor=\"middle\">{}</text>\n",
        (plot_left + plot_right) / 2.0,
        escape(&spec.footnote)
    ));

    // Grid and ticks.
    let ticks = 5usize;
    for t in 0..=ticks {
        let frac = t as f64 / ticks as f64;
        let xv = xr.min + frac * (xr.max - xr.min);
        let yv = yr.min + frac * (yr.max - yr.min);
        let xp = x_px(xv);
        let yp = y_px(yv);
        out.push_str(&format!(
            "<line x1=\"{xp:.1}\" y1=\"{plot_top:.1}\" x2=\"{xp:.1}\" y2=\"{plot_bottom:.1}\" \
             stroke=\"#e0e0e0\" stroke-width=\"1\"/>\n"
        ));
        out.push_str(&format!(
            "<line x1=\"{plot_left:.1}\" y1=\"{yp:.1}\" x2=\"{plot_right:.1}\" y2=\"{yp:.1}\" \
             stroke=\"#e0e0e0\" stroke-width=\"1\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{xp:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            plot_bottom + 16.0,
            fmt_tick(xv)
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
            plot_left - 6.0,
            yp + 3.5,
            fmt_tick(yv)
        ));
    }

    // Axes.
    out.push_str(&format!(
        "<line x1=\"{plot_left}\" y1=\"{plot_bottom}\" x2=\"{plot_right}\" y2=\"{plot_bottom}\" \
         stroke=\"black\" stroke-width=\"1.2\"/>\n"
    ));
    out.push_str(&format!(
        "<line x1=\"{plot_left}\" y1=\"{plot_top}\" x2=\"{plot_left}\" y2=\"{plot_bottom}\" \
         stroke=\"black\" stroke-width=\"1.2\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        (plot_left + plot_right) / 2.0,
        HEIGHT - 14.0,
        escape(&spec.x_label)
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {})\">{}</text>\n",
        (plot_top + plot_bottom) / 2.0,
        (plot_top + plot_bottom) / 2.0,
        escape(&spec.y_label)
    ));

    // Bands first so lines draw on top.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(band) = &s.band {
            if band.len() >= 2 {
                let mut d = String::from("M");
                for (x, lo, _) in band {
                    d.push_str(&format!(" {:.2},{:.2}", x_px(*x), y_px(*lo)));
                }
                for (x, _, hi) in band.iter().rev() {
                    d.push_str(&format!(" {:.2},{:.2}", x_px(*x), y_px(*hi)));
                }
                d.push('Z');
                out.push_str(&format!(
                    "<path d=\"{d}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n"
                ));
            }
        }
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            s.points.iter().map(|(x, y)| format!("{:.2},{:.2}", x_px(*x), y_px(*y))).collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            pts.join(" ")
        ));
    }

    // Legend.
    let legend_x = plot_right + 12.0;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = plot_top + 10.0 + i as f64 * 18.0;
        out.push_str(&format!(
            "<line x1=\"{legend_x}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" \
             stroke-width=\"2.5\"/>\n",
            legend_x + 22.0
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\">{}</text>\n",
            legend_x + 28.0,
            y + 3.5,
            escape(&s.label)
        ));
    }

    out.push_str("</svg>\n");
    out
}
