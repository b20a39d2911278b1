//! Hand-emitted SVG calibration plots: identity diagonal, pooled curve,
//! shaded confidence band, dashed prediction bounds, optional per-cluster
//! curves, and an optional outcome-stratified risk histogram panel.

use std::fmt::Write as _;

use thiserror::Error;

use super::{ClusteredDataset, CurveExport};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("canvas must have positive dimensions")]
    ZeroCanvas,
    #[error("invalid curve: {0}")]
    BadCurve(#[from] super::DataError),
}

/// Plot layout and content switches.
#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub width: u32,
    pub height: u32,
    /// Draw the outcome-stratified histogram of predicted risks below the
    /// main panel (needs the dataset).
    pub show_histogram: bool,
    /// Draw the identity diagonal.
    pub ideal_line: bool,
    pub hist_bins: usize,
}

impl Default for PlotSpec {
    fn default() -> Self {
        Self { width: 640, height: 640, show_histogram: true, ideal_line: true, hist_bins: 40 }
    }
}

struct Frame {
    x0: f64,
    y0: f64, // bottom in px (larger value)
    w: f64,
    h: f64,
}

impl Frame {
    fn px(&self, p: f64) -> f64 {
        self.x0 + p * self.w
    }
    fn py(&self, v: f64) -> f64 {
        self.y0 - v * self.h
    }
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

fn path_from_points(points: &[(f64, f64)]) -> String {
    let mut d = String::new();
    for (i, (x, y)) in points.iter().enumerate() {
        let cmd = if i == 0 { 'M' } else { 'L' };
        let _ = write!(d, "{cmd}{} {} ", fmt2(*x), fmt2(*y));
    }
    d.trim_end().to_string()
}

/// Contiguous runs of grid indices where `value(i)` is present.
fn runs<F: Fn(usize) -> Option<(f64, f64)>>(n: usize, value: F) -> Vec<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    let mut current: Vec<(f64, f64)> = Vec::new();
    for i in 0..n {
        match value(i) {
            Some(p) => current.push(p),
            None => {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Render a calibration curve as a standalone SVG 1.1 document.
/// The histogram panel is drawn when `spec.show_histogram` is set and a
/// dataset is supplied.
pub fn render_svg(
    curve: &CurveExport,
    spec: &PlotSpec,
    data: Option<&ClusteredDataset>,
) -> Result<String, PlotError> {
    if spec.width == 0 || spec.height == 0 || spec.hist_bins == 0 {
        return Err(PlotError::ZeroCanvas);
    }
    curve.validate()?;

    let w = spec.width as f64;
    let h = spec.height as f64;
    let (ml, mr, mt, mb) = (52.0, 16.0, 16.0, 42.0);
    let with_hist = spec.show_histogram && data.is_some();
    let inner_h = h - mt - mb;
    let hist_h = if with_hist { (0.20 * inner_h).floor() } else { 0.0 };
    let gap = if with_hist { 10.0 } else { 0.0 };
    let main = Frame { x0: ml, y0: mt + inner_h - hist_h - gap, w: w - ml - mr, h: inner_h - hist_h - gap };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{}" height="{}" viewBox="0 0 {} {}">"##,
        spec.width, spec.height, spec.width, spec.height
    );
    let _ = writeln!(s, r##"<rect width="{}" height="{}" fill="white"/>"##, spec.width, spec.height);

    // Axes with ticks every 0.2.
    let _ = writeln!(
        s,
        r##"<g id="axes" stroke="#333333" stroke-width="1" fill="none">"##
    );
    let _ = writeln!(
        s,
        r##"<path d="M{} {} L{} {} L{} {}"/>"##,
        fmt2(main.px(0.0)),
        fmt2(main.py(1.0)),
        fmt2(main.px(0.0)),
        fmt2(main.py(0.0)),
        fmt2(main.px(1.0)),
        fmt2(main.py(0.0))
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}"/>"##,
            fmt2(main.px(v)),
            fmt2(main.py(0.0)),
            fmt2(main.px(v)),
            fmt2(main.py(0.0) + 5.0)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}"/>"##,
            fmt2(main.px(0.0) - 5.0),
            fmt2(main.py(v)),
            fmt2(main.px(0.0)),
            fmt2(main.py(v))
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r##"<g id="tick-labels" font-family="sans-serif" font-size="11" fill="#333333">"##);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" text-anchor="middle">{:.1}</text>"##,
            fmt2(main.px(v)),
            fmt2(main.py(0.0) + 18.0),
            v
        );
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" text-anchor="end">{:.1}</text>"##,
            fmt2(main.px(0.0) - 8.0),
            fmt2(main.py(v) + 4.0),
            v
        );
    }
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{}" text-anchor="middle">estimated risk</text>"##,
        fmt2(main.px(0.5)),
        fmt2(main.py(0.0) + 34.0)
    );
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">observed proportion</text>"##,
        fmt2(main.px(0.0) - 36.0),
        fmt2(main.py(0.5)),
        fmt2(main.px(0.0) - 36.0),
        fmt2(main.py(0.5))
    );
    let _ = writeln!(s, "</g>");

    let n = curve.grid.len();

    // Confidence band as a closed region per contiguous run.
    let band_runs = {
        let mut out: Vec<Vec<(f64, f64, f64)>> = Vec::new();
        let mut cur: Vec<(f64, f64, f64)> = Vec::new();
        for i in 0..n {
            match (curve.ci_lo[i], curve.ci_hi[i]) {
                (Some(lo), Some(hi)) => cur.push((curve.grid[i], lo, hi)),
                _ => {
                    if !cur.is_empty() {
                        out.push(std::mem::take(&mut cur));
                    }
                }
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    };
    for (ri, run) in band_runs.iter().enumerate() {
        if run.len() < 2 {
            continue;
        }
        let mut pts: Vec<(f64, f64)> =
            run.iter().map(|&(g, _, hi)| (main.px(g), main.py(hi))).collect();
        pts.extend(run.iter().rev().map(|&(g, lo, _)| (main.px(g), main.py(lo))));
        let _ = writeln!(
            s,
            r##"<path id="ci-band-{ri}" class="ci-band" d="{} Z" fill="#9ecae1" fill-opacity="0.45" stroke="none"/>"##,
            path_from_points(&pts)
        );
    }

    // Prediction interval bounds, dashed.
    for (name, band) in [("pi-lo", &curve.pi_lo), ("pi-hi", &curve.pi_hi)] {
        for (ri, run) in runs(n, |i| band[i].map(|v| (main.px(curve.grid[i]), main.py(v))))
            .iter()
            .enumerate()
        {
            if run.len() < 2 {
                continue;
            }
            let _ = writeln!(
                s,
                r##"<path id="{name}-{ri}" class="pi-bound" d="{}" fill="none" stroke="#08519c" stroke-width="1.2" stroke-dasharray="6 4"/>"##,
                path_from_points(run)
            );
        }
    }

    // Per-cluster thin curves.
    if let Some(cluster_curves) = &curve.cluster_curves {
        let _ = writeln!(s, r##"<g id="cluster-curves" fill="none" stroke="#a0a0a0" stroke-width="0.8" stroke-opacity="0.85">"##);
        for (label, values) in cluster_curves {
            for run in runs(n, |i| values[i].map(|v| (main.px(curve.grid[i]), main.py(v)))) {
                if run.len() < 2 {
                    continue;
                }
                let _ = writeln!(
                    s,
                    r##"<path class="cluster-curve" data-cluster="{}" d="{}"/>"##,
                    xml_escape(label),
                    path_from_points(&run)
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }

    // Identity diagonal.
    if spec.ideal_line {
        let _ = writeln!(
            s,
            r##"<path id="identity" d="M{} {} L{} {}" fill="none" stroke="#777777" stroke-width="1" stroke-dasharray="2 3"/>"##,
            fmt2(main.px(0.0)),
            fmt2(main.py(0.0)),
            fmt2(main.px(1.0)),
            fmt2(main.py(1.0))
        );
    }

    // Pooled estimate.
    let est_runs = runs(n, |i| curve.estimate[i].map(|v| (main.px(curve.grid[i]), main.py(v))));
    for (ri, run) in est_runs.iter().enumerate() {
        if run.len() < 2 {
            continue;
        }
        let _ = writeln!(
            s,
            r##"<path id="estimate-{ri}" class="estimate" d="{}" fill="none" stroke="#1f77b4" stroke-width="1.8"/>"##,
            path_from_points(run)
        );
    }
    // Point markers when the grid is coarse (grouped calibration).
    if n <= 30 {
        for i in 0..n {
            if let Some(v) = curve.estimate[i] {
                let _ = writeln!(
                    s,
                    r##"<circle class="estimate-point" cx="{}" cy="{}" r="2.6" fill="#1f77b4"/>"##,
                    fmt2(main.px(curve.grid[i])),
                    fmt2(main.py(v))
                );
            }
        }
    }

    // Histogram panel: events above the midline, non-events below.
    if with_hist {
        let data = data.expect("checked above");
        let bins = spec.hist_bins;
        let mut counts_event = vec![0usize; bins];
        let mut counts_none = vec![0usize; bins];
        for r in data.records() {
            let mut b = (r.p_hat * bins as f64).floor() as usize;
            if b >= bins {
                b = bins - 1;
            }
            if r.y == 1 {
                counts_event[b] += 1;
            } else {
                counts_none[b] += 1;
            }
        }
        let max_count = counts_event
            .iter()
            .chain(counts_none.iter())
            .copied()
            .max()
            .unwrap_or(0)
            .max(1) as f64;
        let top = main.y0 + gap;
        let mid = top + hist_h / 2.0;
        let half = hist_h / 2.0 - 1.0;
        let bw = main.w / bins as f64;
        let _ = writeln!(s, r##"<g id="histogram">"##);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#333333" stroke-width="0.8"/>"##,
            fmt2(main.x0),
            fmt2(mid),
            fmt2(main.x0 + main.w),
            fmt2(mid)
        );
        for b in 0..bins {
            let x = main.x0 + b as f64 * bw;
            if counts_event[b] > 0 {
                let bh = counts_event[b] as f64 / max_count * half;
                let _ = writeln!(
                    s,
                    r##"<rect class="hist-event" x="{}" y="{}" width="{}" height="{}" fill="#d62728" fill-opacity="0.8"/>"##,
                    fmt2(x),
                    fmt2(mid - bh),
                    fmt2(bw.max(0.5)),
                    fmt2(bh)
                );
            }
            if counts_none[b] > 0 {
                let bh = counts_none[b] as f64 / max_count * half;
                let _ = writeln!(
                    s,
                    r##"<rect class="hist-nonevent" x="{}" y="{}" width="{}" height="{}" fill="#1f77b4" fill-opacity="0.8"/>"##,
                    fmt2(x),
                    fmt2(mid),
                    fmt2(bw.max(0.5)),
                    fmt2(bh)
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }

    let _ = writeln!(s, "</svg>");
    Ok(s)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
