//! Aggregates metrics rows across seeds into per-experiment tables and plots.

use std::fmt::Write as _;

use super::metrics::MetricsRow;
use crate::error::{Error, Result};

/// Metrics averaged by the report, by column name.
pub const REPORT_METRICS: [&str; 6] = [
    "success_rate",
    "final_loss",
    "probe_rmse",
    "probe_absrel",
    "gate_mean_clean",
    "gate_mean_corrupted",
];

fn metric_values(r: &MetricsRow) -> [Option<f64>; 6] {
    [
        r.success_rate,
        r.final_loss,
        r.probe_rmse,
        r.probe_absrel,
        r.gate_mean_clean,
        r.gate_mean_corrupted,
    ]
}

/// The labels that identify a condition; rows differing only in seed and
/// run id share one.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub experiment: String,
    pub head_kind: String,
    pub fusion_strategy: String,
    pub denoise_steps: Option<usize>,
    pub chunk_h: Option<usize>,
    pub perturbation_kind: String,
    pub perturbation_magnitude: Option<f64>,
}

impl Condition {
    fn of(r: &MetricsRow) -> Self {
        Self {
            experiment: r.experiment.clone(),
            head_kind: r.head_kind.clone(),
            fusion_strategy: r.fusion_strategy.clone(),
            denoise_steps: r.denoise_steps,
            chunk_h: r.chunk_h,
            perturbation_kind: r.perturbation_kind.clone(),
            perturbation_magnitude: r.perturbation_magnitude,
        }
    }
}

/// Mean and sample standard deviation; a single value has std 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(xs: &[f64]) -> Option<MeanStd> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std, n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub condition: Condition,
    pub seeds: usize,
    /// One entry per [`REPORT_METRICS`] column.
    pub metrics: [Option<MeanStd>; 6],
}

/// Groups rows by condition in first-appearance order.
pub fn aggregate(rows: &[MetricsRow]) -> Result<Vec<Aggregate>> {
    if rows.is_empty() {
        return Err(Error::NoData("no metrics rows to report".into()));
    }
    let mut groups: Vec<(Condition, Vec<&MetricsRow>)> = Vec::new();
    for r in rows {
        let c = Condition::of(r);
        match groups.iter_mut().find(|(g, _)| *g == c) {
            Some((_, v)) => v.push(r),
            None => groups.push((c, vec![r])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(condition, rs)| {
            let metrics = std::array::from_fn(|m| {
                let xs: Vec<f64> = rs.iter().filter_map(|r| metric_values(r)[m]).collect();
                mean_std(&xs)
            });
            Aggregate {
                condition,
                seeds: rs.len(),
                metrics,
            }
        })
        .collect())
}

fn opt<X: ToString>(x: &Option<X>) -> String {
    x.as_ref().map(|v| v.to_string()).unwrap_or_default()
}

fn table_csv(aggs: &[&Aggregate]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = [
        "experiment",
        "head_kind",
        "fusion_strategy",
        "denoise_steps",
        "chunk_h",
        "perturbation_kind",
        "perturbation_magnitude",
        "seeds",
    ]
    .map(String::from)
    .to_vec();
    for m in REPORT_METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header)?;
    for a in aggs {
        let c = &a.condition;
        let mut rec = vec![
            c.experiment.clone(),
            c.head_kind.clone(),
            c.fusion_strategy.clone(),
            opt(&c.denoise_steps),
            opt(&c.chunk_h),
            c.perturbation_kind.clone(),
            opt(&c.perturbation_magnitude),
            a.seeds.to_string(),
        ];
        for m in &a.metrics {
            rec.push(opt(&m.map(|s| s.mean)));
            rec.push(opt(&m.map(|s| s.std)));
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|_| Error::Format("report table is not UTF-8".into()))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn svg_open(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, WIDTH / 2.0, escape(title));
    let (x0, y0, x1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{MARGIN}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, WIDTH / 2.0, HEIGHT - 20.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    s
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || hi - lo < 1e-12 {
        (lo.min(0.0), hi.max(lo) + 1.0)
    } else {
        (lo, hi)
    }
}

/// One polyline per named series of `(x, y)` points.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = svg_open(title, x_label, y_label);
    let (xl, xh) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (yl, yh) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).chain([0.0]));
    let sx = |x: f64| MARGIN + (x - xl) / (xh - xl) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - yl) / (yh - yl) * (HEIGHT - 2.0 * MARGIN);
    for (x, label) in [(xl, xl), (xh, xh)] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{label}</text>"#, sx(x), HEIGHT - MARGIN + 14.0);
    }
    for y in [yl, yh] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="10">{y:.3}</text>"#, MARGIN - 4.0, sy(y));
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" "));
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-size="11" fill="{color}">{}</text>"#, WIDTH - 180.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// One bar per labelled value.
pub fn bar_plot(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut s = svg_open(title, "", y_label);
    let (_, yh) = range(bars.iter().map(|b| b.1).chain([0.0]));
    let slot = (WIDTH - 2.0 * MARGIN) / bars.len().max(1) as f64;
    for (i, (name, v)) in bars.iter().enumerate() {
        let h = v.max(0.0) / yh * (HEIGHT - 2.0 * MARGIN);
        let x = MARGIN + slot * i as f64 + slot * 0.2;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
            HEIGHT - MARGIN - h,
            slot * 0.6,
            COLORS[i % COLORS.len()]
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="11">{} ({v:.4})</text>"#, x + slot * 0.3, HEIGHT - MARGIN + 14.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn series_by(
    aggs: &[Aggregate],
    experiment: &str,
    key: impl Fn(&Condition) -> Option<(String, f64)>,
) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for a in aggs.iter().filter(|a| a.condition.experiment == experiment && a.condition.perturbation_kind.is_empty()) {
        let (Some((name, x)), Some(y)) = (key(&a.condition), a.metrics[0]) else {
            continue;
        };
        match series.iter_mut().find(|(n, _)| *n == name) {
            Some((_, pts)) => pts.push((x, y.mean)),
            None => series.push((name, vec![(x, y.mean)])),
        }
    }
    for (_, pts) in &mut series {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    series
}

/// CSV tables and SVG plots, each as `(file name, contents)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub tables: Vec<(String, String)>,
    pub plots: Vec<(String, String)>,
}

pub fn emit_report(rows: &[MetricsRow]) -> Result<Report> {
    let aggs = aggregate(rows)?;
    let mut experiments: Vec<&str> = Vec::new();
    for a in &aggs {
        if !experiments.contains(&a.condition.experiment.as_str()) {
            experiments.push(&a.condition.experiment);
        }
    }
    let mut tables = Vec::new();
    for e in experiments {
        let group: Vec<&Aggregate> = aggs.iter().filter(|a| a.condition.experiment == e).collect();
        tables.push((format!("{e}_summary.csv"), table_csv(&group)?));
    }

    let mut plots = Vec::new();
    let by_chunk = series_by(&aggs, "ablate", |c| Some((format!("{} N={}", c.head_kind, c.denoise_steps?), c.chunk_h? as f64)));
    if !by_chunk.is_empty() {
        plots.push((
            "success_vs_chunk.svg".to_string(),
            line_plot("Success vs chunk size", "chunk size H", "success rate", &by_chunk),
        ));
    }
    let by_steps = series_by(&aggs, "ablate", |c| Some((format!("{} H={}", c.head_kind, c.chunk_h?), c.denoise_steps? as f64)));
    if !by_steps.is_empty() {
        plots.push((
            "success_vs_steps.svg".to_string(),
            line_plot("Success vs denoising steps", "denoising steps N", "success rate", &by_steps),
        ));
    }
    let bars: Vec<(String, f64)> = aggs
        .iter()
        .filter(|a| a.condition.experiment == "depth_probe")
        .filter_map(|a| Some((a.condition.fusion_strategy.clone(), a.metrics[2]?.mean)))
        .collect();
    if !bars.is_empty() {
        plots.push(("probe_rmse.svg".to_string(), bar_plot("Depth probe RMSE", "RMSE", &bars)));
    }
    Ok(Report { tables, plots })
}
