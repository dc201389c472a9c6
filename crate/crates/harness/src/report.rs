//! Study outputs: report JSON, flat CSV tables, a timestamp sidecar and PNG
//! plots.
//!
//! Timestamps live in the sidecar so the report JSON itself stays a pure
//! function of the config.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{SystemTime, UNIX_EPOCH};

use plotters::prelude::*;
use plotters::style::FontStyle;
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::study::StudyReport;

pub const REPORT_FILE: &str = "study.json";
pub const CELLS_FILE: &str = "cells.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TRENDS_FILE: &str = "trends.csv";
pub const RUN_INFO_FILE: &str = "run_info.json";
pub const CONDITION_PLOT: &str = "rmse_by_condition.png";
pub const TREND_PLOT: &str = "trends.png";

/// Searched in order when `DEPTHPROMPT_FONT` is unset.
const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];
const FONT_FAMILY: &str = "sans-serif";

#[derive(Debug, Clone, Default)]
pub struct WrittenReport {
    pub files: Vec<PathBuf>,
    /// Why plots were not drawn, if they were not.
    pub plot_warning: Option<String>,
}

#[derive(Serialize)]
struct RunInfo<'a> {
    config_hash: &'a str,
    started_unix_s: u64,
    finished_unix_s: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Serialize)]
struct CellRow<'a> {
    seed: u64,
    run: &'a str,
    variant: &'a str,
    rda_enabled: bool,
    train: String,
    test: &'a str,
    test_spec: String,
    rmse: f64,
    mae: f64,
    delta1: f64,
    n_valid: u64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    run: &'a str,
    test: &'a str,
    mean_rmse: f64,
}

#[derive(Serialize)]
struct TrendRow<'a> {
    trend: &'a str,
    seed: u64,
    value: f64,
    reference: f64,
    holds: bool,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Writes everything under `dir`. `started` is the unix time the study began.
pub fn write_report(report: &StudyReport, dir: &Path, started: u64) -> Result<WrittenReport> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut out = WrittenReport::default();

    let path = dir.join(REPORT_FILE);
    std::fs::write(&path, report.to_json()?).map_err(|e| HarnessError::io(&path, e))?;
    out.files.push(path);

    let path = dir.join(CELLS_FILE);
    write_csv(
        &path,
        report.cells.iter().map(|c| CellRow {
            seed: c.seed,
            run: &c.run,
            variant: c.variant.label(),
            rda_enabled: c.rda_enabled,
            train: c.train_spec.label(),
            test: &c.test,
            test_spec: c.test_spec.label(),
            rmse: c.metrics.rmse,
            mae: c.metrics.mae,
            delta1: c.metrics.delta1,
            n_valid: c.metrics.n_valid,
        }),
    )?;
    out.files.push(path);

    let means = report.mean_rmse();
    let path = dir.join(SUMMARY_FILE);
    write_csv(
        &path,
        means.iter().map(|((run, test), &mean_rmse)| SummaryRow { run, test, mean_rmse }),
    )?;
    out.files.push(path);

    let path = dir.join(TRENDS_FILE);
    write_csv(
        &path,
        report.trends.iter().flat_map(|t| {
            t.samples.iter().map(|s| TrendRow {
                trend: &t.name,
                seed: s.seed,
                value: s.value,
                reference: s.reference,
                holds: s.holds,
            })
        }),
    )?;
    out.files.push(path);

    let path = dir.join(RUN_INFO_FILE);
    let info = RunInfo {
        config_hash: &report.config_hash,
        started_unix_s: started,
        finished_unix_s: unix_now(),
    };
    std::fs::write(&path, serde_json::to_string_pretty(&info)?).map_err(|e| HarnessError::io(&path, e))?;
    out.files.push(path);

    match ensure_font() {
        Ok(()) => {
            let path = dir.join(CONDITION_PLOT);
            plot_conditions(report, &path)?;
            out.files.push(path);
            let path = dir.join(TREND_PLOT);
            plot_trends(report, &path)?;
            out.files.push(path);
        }
        Err(why) => out.plot_warning = Some(why),
    }
    Ok(out)
}

/// Registers a system font with the plotting backend once per process.
fn ensure_font() -> std::result::Result<(), String> {
    static FONT: OnceLock<std::result::Result<(), String>> = OnceLock::new();
    FONT.get_or_init(|| {
        let explicit = std::env::var_os("DEPTHPROMPT_FONT").map(PathBuf::from);
        let candidates = explicit.into_iter().chain(FONT_CANDIDATES.iter().map(PathBuf::from));
        for path in candidates {
            if let Ok(bytes) = std::fs::read(&path) {
                // the backend keeps fonts for the life of the process
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font(FONT_FAMILY, FontStyle::Normal, bytes).is_ok() {
                    return Ok(());
                }
            }
        }
        Err("no usable TrueType font found; set DEPTHPROMPT_FONT to draw plots".to_string())
    })
    .clone()
}

fn plot_err<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::Plot(e.to_string())
}

fn series_color(i: usize) -> RGBColor {
    const PALETTE: [RGBColor; 8] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
        RGBColor(227, 119, 194),
        RGBColor(127, 127, 127),
    ];
    PALETTE[i % PALETTE.len()]
}

/// Grouped bars: mean RMSE over seeds per (test condition, run).
fn plot_conditions(report: &StudyReport, path: &Path) -> Result<()> {
    let means = report.mean_rmse();
    let runs: Vec<&str> = report.runs.iter().map(|r| r.name.as_str()).collect();
    let tests: Vec<&str> = report.conditions.iter().map(|c| c.name.as_str()).collect();
    let top = means.values().cloned().fold(0.0_f64, f64::max).max(1e-6) * 1.1;

    let root = BitMapBackend::new(path, (1100, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (plot, legend) = root.split_horizontally(900);
    let mut chart = ChartBuilder::on(&plot)
        .caption("Mean RMSE by test condition", (FONT_FAMILY, 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..tests.len() as f64, 0.0..top)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(tests.len() * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-6 && i < tests.len() {
                tests[i].to_string()
            } else {
                String::new()
            }
        })
        .y_desc("RMSE (m)")
        .label_style((FONT_FAMILY, 14))
        .draw()
        .map_err(plot_err)?;

    let width = 0.8 / runs.len() as f64;
    for (r, run) in runs.iter().enumerate() {
        let color = series_color(r);
        let bars = tests.iter().enumerate().filter_map(|(t, test)| {
            let v = *means.get(&(run.to_string(), test.to_string()))?;
            let x0 = t as f64 + 0.1 + r as f64 * width;
            Some(Rectangle::new([(x0, 0.0), (x0 + width, v)], color.filled()))
        });
        chart.draw_series(bars).map_err(plot_err)?;
    }

    for (r, run) in runs.iter().enumerate() {
        let y = 40 + 24 * r as i32;
        legend
            .draw(&Rectangle::new([(10, y), (26, y + 14)], series_color(r).filled()))
            .map_err(plot_err)?;
        legend
            .draw(&Text::new(run.to_string(), (34, y), (FONT_FAMILY, 15)))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// One panel per trend: per-seed value (filled) against reference (hollow).
fn plot_trends(report: &StudyReport, path: &Path) -> Result<()> {
    let n = report.trends.len().max(1);
    let root = BitMapBackend::new(path, (380 * n as u32, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((1, n));
    for (trend, panel) in report.trends.iter().zip(panels.iter()) {
        let top = trend
            .samples
            .iter()
            .flat_map(|s| [s.value, s.reference])
            .fold(0.0_f64, f64::max)
            .max(1e-6)
            * 1.15;
        let seeds = trend.samples.len().max(1) as f64;
        let verdict = if trend.passed { "holds" } else { "fails" };
        let mut chart = ChartBuilder::on(panel)
            .caption(
                format!("{} ({}/{} seeds, {verdict})", trend.name, trend.holds_count, trend.samples.len()),
                (FONT_FAMILY, 16),
            )
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(-0.5..seeds - 0.5, 0.0..top)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("seed index")
            .x_labels(trend.samples.len().max(1))
            .x_label_formatter(&|x| format!("{:.0}", x))
            .label_style((FONT_FAMILY, 13))
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(
                trend
                    .samples
                    .iter()
                    .enumerate()
                    .map(|(i, s)| Circle::new((i as f64, s.value), 6, series_color(0).filled())),
            )
            .map_err(plot_err)?;
        chart
            .draw_series(
                trend
                    .samples
                    .iter()
                    .enumerate()
                    .map(|(i, s)| Circle::new((i as f64, s.reference), 6, series_color(3).stroke_width(2))),
            )
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}
