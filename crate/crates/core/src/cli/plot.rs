//! Static SVG line charts for learning curves and FROC curves.

use std::fmt::Write;

use crate::error::{data_err, Result};
use crate::eval::{froc_score, FrocCurve, FrocPoint, MetricsLog, FROC_RATES};

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Frame {
    svg: String,
    x_range: (f64, f64),
}

impl Frame {
    fn new(title: &str, x_label: &str, y_label: &str, x_range: (f64, f64)) -> Self {
        let mut svg = String::new();
        let _ = write!(
            svg,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
             <text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n\
             <line x1=\"{LEFT}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
             <line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
             <text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
            (LEFT + W - RIGHT) / 2.0,
            escape(title),
            H - BOTTOM,
            W - RIGHT,
            H - BOTTOM,
            H - BOTTOM,
            (LEFT + W - RIGHT) / 2.0,
            H - 15.0,
            escape(x_label),
            (TOP + H - BOTTOM) / 2.0,
            (TOP + H - BOTTOM) / 2.0,
            escape(y_label),
        );
        for k in 0..=5 {
            let v = k as f64 / 5.0;
            let y = Self::py(v);
            let _ = writeln!(
                svg,
                "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{LEFT}\" y2=\"{y:.1}\" stroke=\"black\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>",
                LEFT - 4.0,
                LEFT - 7.0,
                y + 4.0
            );
        }
        Frame { svg, x_range }
    }

    fn px(&self, x: f64) -> f64 {
        let (lo, hi) = self.x_range;
        let t = if hi > lo { (x - lo) / (hi - lo) } else { 0.5 };
        LEFT + t.clamp(0.0, 1.0) * (W - LEFT - RIGHT)
    }

    fn py(v: f64) -> f64 {
        H - BOTTOM - v.clamp(0.0, 1.0) * (H - TOP - BOTTOM)
    }

    fn x_tick(&mut self, x: f64, label: &str) {
        let px = self.px(x);
        let _ = writeln!(
            self.svg,
            "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"black\"/><text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>",
            H - BOTTOM,
            H - BOTTOM + 4.0,
            H - BOTTOM + 18.0
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], colour: &str, dashed: bool) {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", self.px(x), Self::py(y)))
            .collect();
        let dash = if dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let _ = writeln!(
            self.svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"{dash}/>",
            coords.join(" ")
        );
    }

    fn marker(&mut self, x: f64, y: f64, colour: &str) {
        let _ = writeln!(
            self.svg,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3.5\" fill=\"{colour}\"/>",
            self.px(x),
            Self::py(y)
        );
    }

    fn legend(&mut self, row: usize, colour: &str, dashed: bool, text: &str) {
        let y = TOP + 10.0 + 18.0 * row as f64;
        let x = W - RIGHT + 12.0;
        let dash = if dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let _ = writeln!(
            self.svg,
            "<line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{colour}\" stroke-width=\"2\"{dash}/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            x + 22.0,
            x + 27.0,
            y + 4.0,
            escape(text)
        );
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Validation DSC (solid) and sensitivity (dashed) against the cumulative
/// epoch count, one colour per log.
pub fn learning_curve_svg(series: &[(String, MetricsLog)]) -> Result<String> {
    if series.is_empty() {
        return Err(data_err!("no learning-curve series to plot"));
    }
    if let Some((name, _)) = series.iter().find(|(_, log)| log.is_empty()) {
        return Err(data_err!("{name}: metrics log has no rows"));
    }
    let longest = series.iter().map(|(_, l)| l.rows().len()).max().unwrap_or(1);
    let mut f = Frame::new(
        "Validation metrics per epoch",
        "epoch (cumulative over rounds)",
        "value",
        (1.0, longest.max(2) as f64),
    );
    let step = (longest / 10).max(1);
    for e in (1..=longest).filter(|e| e % step == 0 || *e == 1) {
        f.x_tick(e as f64, &e.to_string());
    }
    for (i, (name, log)) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let finite = |v: f64| v.is_finite().then_some(v);
        let dsc: Vec<(f64, f64)> = log
            .rows()
            .iter()
            .enumerate()
            .filter_map(|(k, r)| finite(r.val_dsc).map(|v| ((k + 1) as f64, v)))
            .collect();
        let sens: Vec<(f64, f64)> = log
            .rows()
            .iter()
            .enumerate()
            .filter_map(|(k, r)| finite(r.val_sens).map(|v| ((k + 1) as f64, v)))
            .collect();
        f.polyline(&dsc, colour, false);
        f.polyline(&sens, colour, true);
        f.legend(2 * i, colour, false, &format!("{name} DSC"));
        f.legend(2 * i + 1, colour, true, &format!("{name} sensitivity"));
    }
    Ok(f.finish())
}

/// Sensitivity against false positives per scan on a log2 axis. Each
/// series shows its step curve, a marker at every standard rate and its
/// mean sensitivity over those rates.
pub fn froc_svg(series: &[(String, Vec<FrocPoint>)]) -> Result<String> {
    if series.is_empty() {
        return Err(data_err!("no FROC series to plot"));
    }
    let lo = FROC_RATES[0].log2();
    let hi = FROC_RATES[FROC_RATES.len() - 1].log2();
    let mut f = Frame::new("FROC", "false positives per scan", "sensitivity", (lo, hi));
    for r in FROC_RATES {
        f.x_tick(r.log2(), &format!("{r}"));
    }
    for (i, (name, points)) in series.iter().enumerate() {
        let curve = FrocCurve::from_points(points.clone(), 1)
            .map_err(|e| data_err!("{name}: {e}"))?;
        let colour = COLOURS[i % COLOURS.len()];
        let mut steps = Vec::new();
        let mut level = curve.sensitivity_at(FROC_RATES[0]);
        steps.push((lo, level));
        for p in curve.points.iter().filter(|p| p.fp_per_scan > FROC_RATES[0]) {
            let x = p.fp_per_scan.log2().min(hi);
            steps.push((x, level));
            level = level.max(p.sensitivity);
            steps.push((x, level));
        }
        steps.push((hi, level));
        f.polyline(&steps, colour, false);
        for r in FROC_RATES {
            f.marker(r.log2(), curve.sensitivity_at(r), colour);
        }
        let score = froc_score(&curve, &FROC_RATES);
        f.legend(i, colour, false, &format!("{name} (mean {score:.3})"));
    }
    Ok(f.finish())
}
