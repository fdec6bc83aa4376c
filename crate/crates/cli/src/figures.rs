//! Deterministic SVG figures: the same analysis JSON always renders to the
//! same bytes. Three chart kinds are provided — a regression scatter with
//! its fitted line, an AP-versus-split-size line chart, and an
//! ambiguous/non-ambiguous bar chart.

use maskprior::eval::AmbiguityReport;
use maskprior::pipeline::OverlapAnalysis;

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 44.0;

const INK: &str = "#222222";
const GRID: &str = "#dddddd";
const BLUE: &str = "#1f77b4";
const RED: &str = "#d62728";
const GRAY: &str = "#7f7f7f";

/// Fixed-precision coordinate formatting keeps output byte-stable.
fn px(v: f64) -> String {
    format!("{v:.2}")
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Svg {
    body: String,
}

impl Svg {
    fn new() -> Svg {
        let mut body = String::new();
        body.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
             viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\">\n"
        ));
        body.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"#ffffff\"/>\n"));
        Svg { body }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        self.body.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{stroke}\" stroke-width=\"{width}\"/>\n",
            px(x1),
            px(y1),
            px(x2),
            px(y2)
        ));
    }

    fn circle(&mut self, cx: f64, cy: f64, r: f64, fill: &str) {
        self.body.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"{r}\" fill=\"{fill}\"/>\n",
            px(cx),
            px(cy)
        ));
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        self.body.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{fill}\"/>\n",
            px(x),
            px(y),
            px(w),
            px(h)
        ));
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, fill: &str, s: &str) {
        self.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"{size}\" text-anchor=\"{anchor}\" fill=\"{fill}\">{}</text>\n",
            px(x),
            px(y),
            esc(s)
        ));
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

/// Data-to-pixel mapping inside the plot frame.
struct Frame {
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn sx(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.xmin) / (self.xmax - self.xmin) * (W - MARGIN_L - MARGIN_R)
    }

    fn sy(&self, y: f64) -> f64 {
        H - MARGIN_B - (y - self.ymin) / (self.ymax - self.ymin) * (H - MARGIN_T - MARGIN_B)
    }
}

/// Round a raw step up to the nearest 1/2/5 × 10^k.
fn nice_step(raw: f64) -> f64 {
    let mag = 10f64.powf(raw.abs().log10().floor());
    let frac = raw / mag;
    let nice = if frac <= 1.0 {
        1.0
    } else if frac <= 2.0 {
        2.0
    } else if frac <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn ticks(min: f64, max: f64) -> Vec<f64> {
    let step = nice_step((max - min) / 4.0);
    let mut t = (min / step).ceil() * step;
    let mut out = Vec::new();
    while t <= max + step * 1e-9 {
        // Snap values like 0.30000000000000004 back onto the grid.
        out.push((t / step).round() * step);
        t += step;
    }
    out
}

/// Pad a data range so points do not sit on the frame edge; handles the
/// degenerate all-equal case.
fn padded(min: f64, max: f64) -> (f64, f64) {
    if min == max {
        (min - 0.5, max + 0.5)
    } else {
        let pad = (max - min) * 0.08;
        (min - pad, max + pad)
    }
}

fn axes(svg: &mut Svg, f: &Frame, title: &str, xlabel: &str, ylabel: &str) {
    for t in ticks(f.xmin, f.xmax) {
        let x = f.sx(t);
        svg.line(x, MARGIN_T, x, H - MARGIN_B, GRID, 1.0);
        svg.text(x, H - MARGIN_B + 16.0, 11.0, "middle", INK, &format!("{t:.2}"));
    }
    for t in ticks(f.ymin, f.ymax) {
        let y = f.sy(t);
        svg.line(MARGIN_L, y, W - MARGIN_R, y, GRID, 1.0);
        svg.text(MARGIN_L - 6.0, y + 4.0, 11.0, "end", INK, &format!("{t:.2}"));
    }
    svg.line(MARGIN_L, H - MARGIN_B, W - MARGIN_R, H - MARGIN_B, INK, 1.0);
    svg.line(MARGIN_L, MARGIN_T, MARGIN_L, H - MARGIN_B, INK, 1.0);
    svg.text(W / 2.0, 20.0, 13.0, "middle", INK, title);
    svg.text(W / 2.0, H - 10.0, 12.0, "middle", INK, xlabel);
    svg.text(14.0, MARGIN_T - 10.0, 12.0, "start", INK, ylabel);
}

/// Scatter of per-class (overlap, AP) with the fitted regression line.
pub fn overlap_figure(analysis: &OverlapAnalysis, title: &str) -> String {
    let (xmin, xmax) = padded(
        analysis.overlap.iter().copied().fold(f64::INFINITY, f64::min).min(0.0),
        analysis.overlap.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.01),
    );
    let (ymin, ymax) = padded(
        analysis.ap.iter().copied().fold(f64::INFINITY, f64::min).min(0.0),
        analysis.ap.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.01),
    );
    let f = Frame { xmin, xmax, ymin, ymax };
    let mut svg = Svg::new();
    axes(&mut svg, &f, title, "per-class mean max box IoU", "mask AP");

    // Fitted line, clipped to the frame's x-range.
    let fit = &analysis.fit;
    let (x1, x2) = (f.xmin, f.xmax);
    svg.line(
        f.sx(x1),
        f.sy(fit.slope * x1 + fit.intercept),
        f.sx(x2),
        f.sy(fit.slope * x2 + fit.intercept),
        RED,
        1.5,
    );
    for (&x, &y) in analysis.overlap.iter().zip(&analysis.ap) {
        svg.circle(f.sx(x), f.sy(y), 3.5, BLUE);
    }
    for (i, &c) in analysis.classes.iter().enumerate() {
        svg.text(
            f.sx(analysis.overlap[i]) + 5.0,
            f.sy(analysis.ap[i]) - 5.0,
            10.0,
            "start",
            GRAY,
            &format!("c{c}"),
        );
    }
    svg.text(
        W - MARGIN_R - 4.0,
        MARGIN_T + 14.0,
        11.0,
        "end",
        RED,
        &format!("slope {:.4}  p {:.3}  n {}", fit.slope, fit.p_two_sided, fit.n),
    );
    svg.finish()
}

/// One sweep measurement: weak-class AP for a given strong-class count.
pub struct SweepPoint {
    pub count: usize,
    pub weak_ap: f64,
}

/// Weak-class AP against the number of strong classes: per-seed points in
/// gray, the per-count mean as a line.
pub fn sweep_figure(points: &[SweepPoint], title: &str) -> String {
    let counts: Vec<usize> = {
        let mut c: Vec<usize> = points.iter().map(|p| p.count).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let (xmin, xmax) = padded(
        counts.first().copied().unwrap_or(0) as f64,
        counts.last().copied().unwrap_or(1) as f64,
    );
    let ap_max = points.iter().map(|p| p.weak_ap).fold(0.01, f64::max);
    let f = Frame { xmin, xmax, ymin: 0.0, ymax: ap_max * 1.1 };
    let mut svg = Svg::new();
    axes(&mut svg, &f, title, "strong classes", "weak-class mask AP");

    for p in points {
        svg.circle(f.sx(p.count as f64), f.sy(p.weak_ap), 3.0, GRAY);
    }
    let means: Vec<(f64, f64)> = counts
        .iter()
        .map(|&c| {
            let ys: Vec<f64> =
                points.iter().filter(|p| p.count == c).map(|p| p.weak_ap).collect();
            (c as f64, ys.iter().sum::<f64>() / ys.len() as f64)
        })
        .collect();
    for pair in means.windows(2) {
        svg.line(
            f.sx(pair[0].0),
            f.sy(pair[0].1),
            f.sx(pair[1].0),
            f.sy(pair[1].1),
            BLUE,
            2.0,
        );
    }
    for &(c, m) in &means {
        svg.circle(f.sx(c), f.sy(m), 4.0, BLUE);
        svg.text(f.sx(c), f.sy(m) - 8.0, 10.0, "middle", INK, &format!("{m:.3}"));
    }
    svg.finish()
}

/// Two bars: mask AP on the ambiguous and non-ambiguous GT subsets.
pub fn ambiguity_figure(report: &AmbiguityReport, title: &str) -> String {
    let bars = [
        ("ambiguous", report.ambiguous.ap, report.num_ambiguous),
        ("non-ambiguous", report.non_ambiguous.ap, report.num_non_ambiguous),
    ];
    let ap_max = bars.iter().map(|b| b.1).fold(0.01, f64::max);
    let f = Frame { xmin: 0.0, xmax: 2.0, ymin: 0.0, ymax: ap_max * 1.15 };
    let mut svg = Svg::new();
    axes(
        &mut svg,
        &f,
        title,
        &format!("instance subset (box IoU >= {:.2})", report.iou_thresh),
        "mask AP",
    );
    for (i, (label, ap, n)) in bars.iter().enumerate() {
        let cx = i as f64 + 0.5;
        let half = 0.28;
        let color = if i == 0 { RED } else { BLUE };
        svg.rect(
            f.sx(cx - half),
            f.sy(*ap),
            f.sx(cx + half) - f.sx(cx - half),
            f.sy(0.0) - f.sy(*ap),
            color,
        );
        svg.text(f.sx(cx), f.sy(*ap) - 6.0, 11.0, "middle", INK, &format!("{ap:.3}"));
        svg.text(f.sx(cx), H - MARGIN_B + 30.0, 11.0, "middle", INK, &format!("{label} (n={n})"));
    }
    svg.finish()
}
