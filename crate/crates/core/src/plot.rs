//! Minimal SVG charts for metrics and evaluation reports.

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::trainer::StepMetrics;

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(s: &mut String, y_max: f64, y_label: &str) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0, MARGIN);
    s.push_str(&format!("<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n"));
    s.push_str(&format!("<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"));
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            x0 - 4.0,
            y + 4.0,
            fmt_tick(v)
        ));
    }
    s.push_str(&format!(
        "<text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    ));
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (0.01..1000.0).contains(&v.abs()) {
        format!("{v:.2}")
    } else {
        format!("{v:.1e}")
    }
}

/// Loss curves (total, world model, flow matching) against step. Action-free
/// steps log a zero flow-matching loss and are left out of that curve.
pub fn loss_curve(metrics: &[StepMetrics]) -> Result<String> {
    if metrics.is_empty() {
        return Err(Error::Invalid("no metrics to plot".into()));
    }
    let series: [(&str, Vec<(f64, f64)>); 3] = [
        ("total", metrics.iter().map(|m| (m.step as f64, m.loss_total)).collect()),
        ("world model", metrics.iter().map(|m| (m.step as f64, m.loss_wm)).collect()),
        (
            "flow matching",
            metrics.iter().filter(|m| m.loss_fm > 0.0).map(|m| (m.step as f64, m.loss_fm)).collect(),
        ),
    ];
    let x_max = metrics.iter().map(|m| m.step).max().unwrap_or(1).max(1) as f64;
    let y_max = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.1))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut s = header("training loss");
    axes(&mut s, y_max, "loss");
    let (x0, y0) = (MARGIN, H - MARGIN);
    let (pw, ph) = (W - 1.5 * MARGIN, H - 2.0 * MARGIN);
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">step (max {})</text>\n",
        x0 + pw / 2.0,
        H - 12.0,
        x_max
    ));
    for (i, (name, pts)) in series.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let path: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{:.1},{:.1}", x0 + x / x_max * pw, y0 - y / y_max * ph))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1\" points=\"{}\"/>\n",
            COLORS[i],
            path.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>\n",
            W - 150.0,
            40.0 + 14.0 * i as f64,
            COLORS[i],
            name
        ));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Vertical bars with labels underneath; values are fractions in `[0, 1]`.
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> Result<String> {
    if bars.is_empty() {
        return Err(Error::Invalid("no bars to plot".into()));
    }
    let mut s = header(title);
    axes(&mut s, 1.0, "success rate");
    let (x0, y0) = (MARGIN, H - MARGIN);
    let (pw, ph) = (W - 1.5 * MARGIN, H - 2.0 * MARGIN);
    let slot = pw / bars.len() as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let v = v.clamp(0.0, 1.0);
        let (bw, bh) = (slot * 0.6, v * ph);
        let x = x0 + slot * i as f64 + slot * 0.2;
        s.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{bw:.1}\" height=\"{bh:.1}\" fill=\"{}\"/>\n",
            y0 - bh,
            COLORS[0]
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.2}</text>\n",
            x + bw / 2.0,
            y0 - bh - 4.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            x + bw / 2.0,
            y0 + 14.0,
            escape(label)
        ));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Success rate of several runs side by side, e.g. a horizon sweep.
pub fn comparison_chart(title: &str, runs: &[(String, &EvalReport)]) -> Result<String> {
    let bars: Vec<(String, f64)> = runs.iter().map(|(l, r)| (l.clone(), r.success_rate)).collect();
    bar_chart(title, &bars)
}

/// Success under each nuisance factor of one report.
pub fn nuisance_chart(report: &EvalReport) -> Result<String> {
    if report.nuisance_breakdown.is_empty() {
        return Err(Error::Invalid("report has no nuisance breakdown".into()));
    }
    let mut bars = vec![("all".to_string(), report.success_rate)];
    bars.extend(report.nuisance_breakdown.iter().map(|b| (b.factor.clone(), b.success_rate)));
    bar_chart("success by nuisance factor", &bars)
}
