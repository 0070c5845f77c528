use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::tables::{read_rows, BoundaryRecord, BOUNDARIES, METRICS};
use crate::error::{Error, Result};
use crate::eval::{mean_std, MetricRecord};

const SERIES: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

struct Point {
    l: usize,
    mean: f64,
    std: f64,
}

/// Per-variant series of mean and std system accuracy against `l`.
fn series(rows: &[&MetricRecord]) -> BTreeMap<String, Vec<Point>> {
    let mut by: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        by.entry((r.variant.clone(), r.l)).or_default().push(r.system_accuracy);
    }
    let mut out: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    for ((variant, l), values) in by {
        let (mean, std) = mean_std(&values);
        out.entry(variant).or_default().push(Point { l, mean, std });
    }
    out
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| mean_std(&v).0)
}

/// One SVG per (dataset, expert, algorithm): system accuracy against the number of
/// expert predictions, with a mean ± std band per expertise variant and horizontal
/// Classifier Alone, Expert Alone and Complete Expert Predictions lines.
///
/// The x axis places the budgets at equal spacing, labeled with `l`.
pub fn emit_plots(
    metrics: &[MetricRecord],
    boundaries: &[BoundaryRecord],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if metrics.is_empty() {
        return Err(Error::Plot("no metric rows to plot".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut groups: BTreeMap<(&str, &str, &str), Vec<&MetricRecord>> = BTreeMap::new();
    for r in metrics {
        groups
            .entry((&r.dataset, &r.expert, &r.algorithm))
            .or_default()
            .push(r);
    }
    let mut written = Vec::new();
    for ((dataset, expert, algorithm), rows) in groups {
        let of = |b: &&BoundaryRecord| b.dataset == dataset && b.expert == expert;
        let base: Vec<&BoundaryRecord> = boundaries.iter().filter(|b| of(b) && b.algorithm.is_empty()).collect();
        let refs = [
            ("Classifier Alone", mean_of(base.iter().map(|b| b.classifier_alone))),
            ("Expert Alone", mean_of(base.iter().map(|b| b.expert_alone))),
            (
                "Complete Expert Predictions",
                mean_of(
                    boundaries
                        .iter()
                        .filter(|b| of(b) && b.algorithm == algorithm)
                        .filter_map(|b| b.complete),
                ),
            ),
        ];
        let curves = series(&rows);
        let ls: Vec<usize> = rows.iter().map(|r| r.l).collect::<BTreeSet<_>>().into_iter().collect();
        let x_of = |l: usize| ls.iter().position(|&v| v == l).expect("l present") as f64;

        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in curves.values().flatten() {
            lo = lo.min(p.mean - p.std);
            hi = hi.max(p.mean + p.std);
        }
        for v in refs.iter().filter_map(|r| r.1) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let pad = ((hi - lo) * 0.1).max(0.01);
        let (lo, hi) = ((lo - pad).max(0.0), (hi + pad).min(1.0));
        let x_max = (ls.len() as f64 - 0.5).max(0.5);

        let path = out_dir.join(format!("{dataset}-{expert}-{algorithm}.svg"));
        {
            let root = SVGBackend::new(&path, (800, 520)).into_drawing_area();
            root.fill(&WHITE).map_err(plot_err)?;
            let mut chart = ChartBuilder::on(&root)
                .caption(format!("{dataset} / {expert} / {algorithm}"), ("sans-serif", 20))
                .margin(12)
                .x_label_area_size(40)
                .y_label_area_size(56)
                .build_cartesian_2d(-0.5..x_max, lo..hi)
                .map_err(plot_err)?;
            chart
                .configure_mesh()
                .x_desc("expert predictions l")
                .y_desc("system accuracy")
                .x_labels(ls.len().max(2))
                .x_label_formatter(&|x| {
                    let i = x.round();
                    if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < ls.len() {
                        ls[i as usize].to_string()
                    } else {
                        String::new()
                    }
                })
                .draw()
                .map_err(plot_err)?;

            for ((name, value), style) in refs.iter().zip([
                BLACK.stroke_width(2),
                RGBColor(120, 120, 120).stroke_width(2),
                RGBColor(255, 127, 14).stroke_width(2),
            ]) {
                if let Some(v) = value {
                    chart
                        .draw_series(LineSeries::new([(-0.5, *v), (x_max, *v)], style))
                        .map_err(plot_err)?
                        .label(*name)
                        .legend(move |(x, y)| PathElement::new([(x, y), (x + 18, y)], style));
                }
            }
            for (i, (variant, points)) in curves.iter().enumerate() {
                let color = SERIES[i % SERIES.len()];
                let mut band: Vec<(f64, f64)> =
                    points.iter().map(|p| (x_of(p.l), p.mean + p.std)).collect();
                band.extend(points.iter().rev().map(|p| (x_of(p.l), p.mean - p.std)));
                chart
                    .draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled())))
                    .map_err(plot_err)?;
                let line: Vec<(f64, f64)> = points.iter().map(|p| (x_of(p.l), p.mean)).collect();
                chart
                    .draw_series(LineSeries::new(line.clone(), color.stroke_width(2)))
                    .map_err(plot_err)?
                    .label(variant.as_str())
                    .legend(move |(x, y)| PathElement::new([(x, y), (x + 18, y)], color.stroke_width(2)));
                chart
                    .draw_series(line.into_iter().map(|p| Circle::new(p, 4, color.filled())))
                    .map_err(plot_err)?;
            }
            chart
                .configure_series_labels()
                .position(SeriesLabelPosition::LowerRight)
                .background_style(WHITE.mix(0.85))
                .border_style(BLACK)
                .draw()
                .map_err(plot_err)?;
            root.present().map_err(plot_err)?;
        }
        written.push(path);
    }
    Ok(written)
}

/// Reads the metric and boundary tables of a run directory and writes its figures to
/// `<dir>/figures`.
pub fn emit_plots_from_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let metrics: Vec<MetricRecord> = read_rows(&dir.join(METRICS))?;
    let boundaries: Vec<BoundaryRecord> = read_rows(&dir.join(BOUNDARIES))?;
    emit_plots(&metrics, &boundaries, &dir.join("figures"))
}
