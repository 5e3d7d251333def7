//! Per-subject CSV and a violin/strip SVG comparing score reports.
//!
//! Rendering is a pure function of the inputs; numbers are printed with
//! fixed precision so identical reports give identical bytes.

use std::fmt::Write as _;

use dmf2mel::losses::ScoreReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const KDE_POINTS: usize = 64;

pub fn csv(runs: &[(String, ScoreReport)]) -> String {
    let mut out = String::from("run,subject_id,split,pearson_r\n");
    for (label, rep) in runs {
        for s in &rep.subjects {
            let _ = writeln!(out, "{},{},{},{}", csv_field(label), s.subject_id, s.split.as_str(), s.pearson_r);
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Gaussian kernel density on `grid`, Silverman bandwidth.
fn kde(v: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n.max(2.0 - 1.0)).sqrt();
    let h = (1.06 * sd * n.powf(-0.2)).max(1e-3);
    grid.iter()
        .map(|g| v.iter().map(|x| (-0.5 * ((g - x) / h).powi(2)).exp()).sum::<f64>() / (n * h))
        .collect()
}

pub fn svg(runs: &[(String, ScoreReport)]) -> String {
    let all: Vec<f64> = runs.iter().flat_map(|(_, r)| r.subjects.iter().map(|s| s.pearson_r)).collect();
    let (mut lo, mut hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (lo, hi) = (-1.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(0.02);
    let (lo, hi) = (lo - pad, hi + pad);
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let y_of = |r: f64| MARGIN + (hi - r) / (hi - lo) * plot_h;
    let slot = (WIDTH - 2.0 * MARGIN) / runs.len().max(1) as f64;
    let half = slot * 0.35;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    // Axis with five ticks.
    let _ = writeln!(
        s,
        r##"<line x1="{m:.2}" y1="{m:.2}" x2="{m:.2}" y2="{b:.2}" stroke="#333333"/>"##,
        m = MARGIN,
        b = HEIGHT - MARGIN
    );
    for i in 0..=4 {
        let r = lo + (hi - lo) * i as f64 / 4.0;
        let y = y_of(r);
        let _ = writeln!(
            s,
            r##"<line x1="{a:.2}" y1="{y:.2}" x2="{m:.2}" y2="{y:.2}" stroke="#333333"/><text x="{t:.2}" y="{ty:.2}" text-anchor="end">{r:.3}</text>"##,
            a = MARGIN - 4.0,
            m = MARGIN,
            t = MARGIN - 6.0,
            ty = y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" transform="rotate(-90 16 {:.2})" text-anchor="middle">Pearson r</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (i, (label, rep)) in runs.iter().enumerate() {
        let cx = MARGIN + slot * (i as f64 + 0.5);
        let vals: Vec<f64> = rep.subjects.iter().map(|x| x.pearson_r).collect();
        let _ = writeln!(s, r#"<g class="run" data-label="{}">"#, escape(label));
        if vals.len() >= 2 {
            let grid: Vec<f64> = (0..KDE_POINTS).map(|k| lo + (hi - lo) * k as f64 / (KDE_POINTS - 1) as f64).collect();
            let dens = kde(&vals, &grid);
            let peak = dens.iter().cloned().fold(0.0, f64::max).max(1e-12);
            let mut pts = Vec::with_capacity(2 * KDE_POINTS);
            for (g, d) in grid.iter().zip(&dens) {
                pts.push(format!("{:.2},{:.2}", cx + d / peak * half, y_of(*g)));
            }
            for (g, d) in grid.iter().zip(&dens).rev() {
                pts.push(format!("{:.2},{:.2}", cx - d / peak * half, y_of(*g)));
            }
            let _ = writeln!(
                s,
                r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.6" stroke="#3182bd"/>"##,
                pts.join(" ")
            );
        }
        for (k, v) in vals.iter().enumerate() {
            // Deterministic jitter from the subject position.
            let jitter = ((k as f64 * 0.618_033_988_7).fract() - 0.5) * half * 0.5;
            let _ = writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#08519c"/>"##,
                cx + jitter,
                y_of(*v)
            );
        }
        if !vals.is_empty() {
            let my = y_of(median(&vals));
            let _ = writeln!(
                s,
                r##"<line class="median" x1="{:.2}" y1="{my:.2}" x2="{:.2}" y2="{my:.2}" stroke="#d62728" stroke-width="2"/>"##,
                cx - half,
                cx + half
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            HEIGHT - MARGIN + 18.0,
            escape(label)
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}
