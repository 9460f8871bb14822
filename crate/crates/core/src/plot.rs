//! Self-contained SVG line charts: one mean curve over a shaded band.

use std::fmt::Write;

use crate::eval::{Aggregate, Band};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick values covering `[lo, hi]` at a 1/2/5 step.
fn ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Line chart of `bands[i].mean` against `x[i]`, with the 5th to 95th
/// percentile band shaded.
pub fn band_chart_svg(title: &str, x_label: &str, y_label: &str, x: &[f64], bands: &[Band]) -> String {
    let n = x.len().min(bands.len());
    let (mut ylo, mut yhi) = bands[..n]
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| (lo.min(b.p5).min(b.mean), hi.max(b.p95).max(b.mean)));
    if !ylo.is_finite() {
        (ylo, yhi) = (0.0, 1.0);
    }
    if yhi - ylo < 1e-9 {
        ylo -= 0.5;
        yhi += 0.5;
    }
    let pad = 0.05 * (yhi - ylo);
    let (ylo, yhi) = (ylo - pad, yhi + pad);
    let (xlo, xhi) = match (x.first(), x.get(n.saturating_sub(1))) {
        (Some(a), Some(b)) if b > a => (*a, *b),
        (Some(a), _) => (*a - 0.5, *a + 0.5),
        _ => (0.0, 1.0),
    };
    let px = |v: f64| LEFT + (v - xlo) / (xhi - xlo) * (W - LEFT - RIGHT);
    let py = |v: f64| TOP + (yhi - v) / (yhi - ylo) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    for t in ticks(ylo, yhi, 6) {
        let y = py(t);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" x2="{}" y1="{y:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            W - RIGHT,
            LEFT - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    for t in ticks(xlo, xhi, 10) {
        let xx = px(t);
        let _ = writeln!(
            s,
            r#"<text x="{xx:.2}" y="{}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 16.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (TOP + H - BOTTOM) / 2.0,
        escape(y_label)
    );
    if n > 0 {
        let mut band = String::new();
        for i in 0..n {
            let _ = write!(band, "{:.2},{:.2} ", px(x[i]), py(bands[i].p95));
        }
        for i in (0..n).rev() {
            let _ = write!(band, "{:.2},{:.2} ", px(x[i]), py(bands[i].p5));
        }
        let _ = writeln!(
            s,
            r##"<polygon points="{}" fill="#4a7ab8" fill-opacity="0.25" stroke="none"/>"##,
            band.trim_end()
        );
        let line: Vec<String> = (0..n).map(|i| format!("{:.2},{:.2}", px(x[i]), py(bands[i].mean))).collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#1f4e8c" stroke-width="2"/>"##,
            line.join(" ")
        );
    }
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{}" text-anchor="end" fill="#555">mean, shaded 5th-95th percentile</text>"##,
        W - RIGHT - 6.0,
        TOP + 16.0
    );
    s.push_str("</svg>\n");
    s
}

/// The three per-epoch charts: `(file stem, svg)`.
pub fn run_charts(agg: &Aggregate) -> Vec<(&'static str, String)> {
    let x: Vec<f64> = agg.per_epoch.iter().map(|e| e.epoch as f64).collect();
    let col = |f: fn(&crate::eval::EpochAggregate) -> Band| agg.per_epoch.iter().map(f).collect::<Vec<_>>();
    let reps = agg.n_reps;
    vec![
        (
            "train_loss",
            band_chart_svg(
                &format!("Training loss ({reps} repetitions)"),
                "epoch",
                "loss",
                &x,
                &col(|e| e.train_loss),
            ),
        ),
        (
            "test_loss",
            band_chart_svg(
                &format!("Test loss ({reps} repetitions)"),
                "epoch",
                "loss",
                &x,
                &col(|e| e.test_loss),
            ),
        ),
        (
            "test_accuracy",
            band_chart_svg(
                &format!("Test candidate-set accuracy ({reps} repetitions)"),
                "epoch",
                "accuracy (%)",
                &x,
                &col(|e| e.test_acc),
            ),
        ),
    ]
}
