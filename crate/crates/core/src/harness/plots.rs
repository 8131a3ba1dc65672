//! SVG line plots of a comparison report, plus the tables they are drawn from.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{Paradigm, Stage, StepMetrics};

use super::{create_dir, ComparisonReport};

/// Files written by [`emit_plots`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    pub entropy_svg: PathBuf,
    pub stability_svg: PathBuf,
    /// Every StepMetrics record of every completed run.
    pub step_metrics_csv: PathBuf,
    /// Every evaluation point of every completed run.
    pub evals_csv: PathBuf,
    /// Per-paradigm seed means plotted in `entropy_svg`.
    pub entropy_mean_csv: PathBuf,
    /// Per-paradigm seed means plotted in `stability_svg`.
    pub stability_mean_csv: PathBuf,
}

/// One StepMetrics record tagged with its run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub paradigm: Paradigm,
    pub seed: u64,
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub mean_rollout_reward: Option<f64>,
    pub label_reward: Option<f64>,
    pub a_label_mean: Option<f64>,
    pub entropy: f64,
    pub grad_norm: f64,
    pub smoothed_fraction: Option<f64>,
    pub degenerate_fraction: Option<f64>,
    pub labels_used: usize,
    pub rollouts_used: usize,
}

impl MetricRow {
    pub fn new(paradigm: Paradigm, seed: u64, m: &StepMetrics) -> Self {
        Self {
            paradigm,
            seed,
            step: m.step,
            stage: m.stage,
            loss: m.loss,
            mean_rollout_reward: m.mean_rollout_reward,
            label_reward: m.label_reward,
            a_label_mean: m.a_label_mean,
            entropy: m.entropy,
            grad_norm: m.grad_norm,
            smoothed_fraction: m.smoothed_fraction,
            degenerate_fraction: m.degenerate_fraction,
            labels_used: m.labels_used,
            rollouts_used: m.rollouts_used,
        }
    }

    pub fn metrics(&self) -> StepMetrics {
        StepMetrics {
            step: self.step,
            stage: self.stage,
            loss: self.loss,
            mean_rollout_reward: self.mean_rollout_reward,
            label_reward: self.label_reward,
            a_label_mean: self.a_label_mean,
            entropy: self.entropy,
            grad_norm: self.grad_norm,
            smoothed_fraction: self.smoothed_fraction,
            degenerate_fraction: self.degenerate_fraction,
            labels_used: self.labels_used,
            rollouts_used: self.rollouts_used,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub paradigm: Paradigm,
    pub seed: u64,
    pub steps_done: usize,
    pub mean_iou: f64,
    pub n_acc: Option<f64>,
    pub format_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub paradigm: Paradigm,
    pub x: usize,
    pub mean: f64,
    pub seeds: usize,
}

pub fn read_metric_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn plot_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::Plot(format!("{e:?}"))
}

fn line_plot(path: &Path, title: &str, y_desc: &str, series: &[(Paradigm, Vec<(usize, f64)>)]) -> Result<()> {
    let x_max = series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.0)).max().unwrap_or(0).max(1);
    let ys = series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.1));
    let (mut y_lo, mut y_hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    if !y_lo.is_finite() {
        (y_lo, y_hi) = (0.0, 1.0);
    }
    let pad = ((y_hi - y_lo) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0usize..x_max, (y_lo - pad)..(y_hi + pad))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc(y_desc)
        .draw()
        .map_err(plot_err)?;
    for (i, (paradigm, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(paradigm.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn curve_rows(report: &ComparisonReport, curve: impl Fn(Paradigm) -> Vec<(usize, f64)>) -> Vec<CurveRow> {
    report
        .paradigms()
        .into_iter()
        .flat_map(|p| {
            let seeds = report.runs_for(p).filter(|r| r.completed()).count();
            curve(p).into_iter().map(move |(x, mean)| CurveRow { paradigm: p, x, mean, seeds })
        })
        .collect()
}

fn series_of(rows: &[CurveRow], paradigms: &[Paradigm]) -> Vec<(Paradigm, Vec<(usize, f64)>)> {
    paradigms
        .iter()
        .map(|&p| (p, rows.iter().filter(|r| r.paradigm == p).map(|r| (r.x, r.mean)).collect()))
        .collect()
}

/// Writes entropy and eval-IoU plots (one series per paradigm, mean over
/// seeds) and the CSV tables behind them into `dir`.
pub fn emit_plots(report: &ComparisonReport, dir: &Path) -> Result<PlotFiles> {
    if !report.runs.iter().any(|r| r.completed()) {
        return Err(Error::EmptyReport("no completed runs to plot".into()));
    }
    create_dir(dir)?;
    let files = PlotFiles {
        entropy_svg: dir.join("entropy.svg"),
        stability_svg: dir.join("stability.svg"),
        step_metrics_csv: dir.join("step_metrics.csv"),
        evals_csv: dir.join("evals.csv"),
        entropy_mean_csv: dir.join("entropy_mean.csv"),
        stability_mean_csv: dir.join("stability_mean.csv"),
    };
    let done: Vec<_> = report.runs.iter().filter(|r| r.completed()).collect();
    let metric_rows: Vec<MetricRow> = done
        .iter()
        .flat_map(|r| r.metrics.iter().map(|m| MetricRow::new(r.paradigm, r.seed, m)))
        .collect();
    write_rows(&files.step_metrics_csv, &metric_rows)?;
    let eval_rows: Vec<EvalRow> = done
        .iter()
        .flat_map(|r| {
            r.evals.iter().map(|e| EvalRow {
                paradigm: r.paradigm,
                seed: r.seed,
                steps_done: e.steps_done,
                mean_iou: e.report.mean_iou,
                n_acc: e.report.n_acc,
                format_rate: e.report.format_rate,
            })
        })
        .collect();
    write_rows(&files.evals_csv, &eval_rows)?;

    let paradigms = report.paradigms();
    let entropy = curve_rows(report, |p| report.entropy_curve(p));
    write_rows(&files.entropy_mean_csv, &entropy)?;
    let stability = curve_rows(report, |p| report.stability_curve(p));
    write_rows(&files.stability_mean_csv, &stability)?;
    line_plot(
        &files.entropy_svg,
        &format!("{}: mean token entropy", report.name),
        "entropy (nats)",
        &series_of(&entropy, &paradigms),
    )?;
    line_plot(
        &files.stability_svg,
        &format!("{}: eval IoU", report.name),
        "mean IoU",
        &series_of(&stability, &paradigms),
    )?;
    Ok(files)
}
