//! Benchmark reports: CSV rows, a JSON document with fits, and a log-log SVG plot.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use visreformer_core::bench::{BenchRecord, Metric, ScalingFit};

/// Column order of the CSV report.
pub const CSV_COLUMNS: [&str; 10] =
    ["variant", "n", "bucket_size", "n_rounds", "lookback", "scores_evaluated", "wall_time_s", "trials", "memory_estimate", "seed"];

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    variant: String,
    n: usize,
    bucket_size: usize,
    n_rounds: usize,
    lookback: usize,
    scores_evaluated: u64,
    wall_time_s: f64,
    trials: usize,
    memory_estimate: f64,
    seed: u64,
}

/// Writes every non-skipped record; skipped points appear only in the JSON report.
pub fn write_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        bail!("no records to report");
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(CSV_COLUMNS)?;
    for r in records.iter().filter(|r| !r.skipped) {
        w.serialize(CsvRow {
            variant: r.variant.clone(),
            n: r.n,
            bucket_size: r.bucket_size,
            n_rounds: r.n_rounds,
            lookback: r.lookback,
            scores_evaluated: r.scores_evaluated,
            wall_time_s: r.wall_time_s,
            trials: r.trials,
            memory_estimate: r.memory_estimate,
            seed: r.seed,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != CSV_COLUMNS {
        bail!("unexpected CSV columns {:?}", header);
    }
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: CsvRow = row?;
        out.push(BenchRecord {
            variant: row.variant,
            n: row.n,
            bucket_size: row.bucket_size,
            n_rounds: row.n_rounds,
            lookback: row.lookback,
            scores_evaluated: row.scores_evaluated,
            wall_time_s: row.wall_time_s,
            trials: row.trials,
            memory_estimate: row.memory_estimate,
            seed: row.seed,
            skipped: false,
        });
    }
    Ok(out)
}

/// The JSON report: records (including skipped ones), fits and provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub threads: usize,
    pub records: Vec<BenchRecord>,
    pub fits: Vec<ScalingFit>,
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn metric_value(r: &BenchRecord, metric: Metric) -> f64 {
    match metric {
        Metric::Scores => r.scores_evaluated as f64,
        Metric::Time => r.wall_time_s,
    }
}

/// Log-log scatter of `metric` against `n`, one series per variant, with the
/// fitted line of each variant that has a fit for `metric`.
pub fn render_svg(records: &[BenchRecord], fits: &[ScalingFit], metric: Metric) -> Result<String> {
    let pts: Vec<&BenchRecord> = records.iter().filter(|r| !r.skipped && metric_value(r, metric) > 0.0).collect();
    if pts.is_empty() {
        bail!("no positive {metric:?} values to plot");
    }
    let xs: Vec<f64> = pts.iter().map(|r| (r.n as f64).log2()).collect();
    let ys: Vec<f64> = pts.iter().map(|r| metric_value(r, metric).log2()).collect();
    let (x0, x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min).floor(), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil());
    let (y0, y1) = (ys.iter().cloned().fold(f64::INFINITY, f64::min).floor(), ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil());
    let (x1, y1) = (x1.max(x0 + 1.0), y1.max(y0 + 1.0));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let label = match metric {
        Metric::Scores => "scores evaluated",
        Metric::Time => "wall time (s)",
    };

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#)?;
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(s, r#"<g class="axes" stroke="black" font-family="sans-serif" font-size="11">"#)?;
    writeln!(s, r#"<line x1="{MARGIN}" y1="{}" x2="{}" y2="{}"/>"#, HEIGHT - MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN)?;
    writeln!(s, r#"<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{}"/>"#, HEIGHT - MARGIN)?;
    for e in x0 as i64..=x1 as i64 {
        let x = px(e as f64);
        writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle" stroke="none">2^{e}</text>"#, HEIGHT - MARGIN + 16.0)?;
    }
    for e in y0 as i64..=y1 as i64 {
        let y = py(e as f64);
        writeln!(s, r#"<text x="{}" y="{y:.1}" text-anchor="end" stroke="none">2^{e}</text>"#, MARGIN - 6.0)?;
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" stroke="none">tokens n</text>"#, WIDTH / 2.0, HEIGHT - 14.0)?;
    writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" stroke="none" transform="rotate(-90 16 {})">{label}</text>"#, HEIGHT / 2.0, HEIGHT / 2.0)?;
    writeln!(s, "</g>")?;

    let mut variants: Vec<&str> = Vec::new();
    for r in &pts {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    for (i, v) in variants.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        writeln!(s, r#"<g class="series" data-variant="{v}" fill="{color}" stroke="{color}">"#)?;
        for (r, (x, y)) in pts.iter().zip(xs.iter().zip(&ys)) {
            if r.variant == *v {
                writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" data-n="{}"/>"#, px(*x), py(*y), r.n)?;
            }
        }
        if let Some(f) = fits.iter().find(|f| f.variant == *v && f.metric == metric) {
            let (a, b) = (x0, x1);
            writeln!(
                s,
                r#"<line class="fit" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke-dasharray="5,3" data-exponent="{:.4}"/>"#,
                px(a),
                py(f.intercept + f.exponent * a),
                px(b),
                py(f.intercept + f.exponent * b),
                f.exponent
            )?;
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" stroke="none" font-family="sans-serif" font-size="12">{v}</text>"#,
            WIDTH - MARGIN - 60.0,
            MARGIN + 16.0 * i as f64
        )?;
        writeln!(s, "</g>")?;
    }
    writeln!(s, "</svg>")?;
    Ok(s)
}

pub fn write_svg(records: &[BenchRecord], fits: &[ScalingFit], metric: Metric, path: &Path) -> Result<()> {
    let svg = render_svg(records, fits, metric)?;
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
