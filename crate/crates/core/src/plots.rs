//! Learning curves across seeds: mean and standard-deviation bands per
//! variant, written as SVG, plus a per-variant summary table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::harness::{read_metrics, MetricsRow};
use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub runs: usize,
    pub attempts: usize,
    pub final_eval_mean: f64,
    pub final_eval_std: f64,
    pub final_train_success_mean: f64,
}

#[derive(Clone, Debug)]
pub struct PlotOutput {
    pub eval_curves: BTreeMap<String, Curve>,
    pub train_curves: BTreeMap<String, Curve>,
    pub summary: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

/// Linear interpolation of `(xs, ys)` at `x`, held constant past the ends.
pub fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    match xs.iter().position(|&v| v >= x) {
        None => *ys.last().expect("non-empty"),
        Some(0) => ys[0],
        Some(i) => {
            let t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
            ys[i - 1] + t * (ys[i] - ys[i - 1])
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    // population spread across seeds
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Mean and spread of several series on the grid of the first one.
pub fn band(series: &[(Vec<f64>, Vec<f64>)], warnings: &mut Vec<String>, label: &str) -> Curve {
    let grid = series[0].0.clone();
    if series.iter().any(|(x, _)| *x != grid) {
        warnings.push(format!("{label}: runs use different cadences, resampled to the first run's grid"));
    }
    let mut mean = Vec::with_capacity(grid.len());
    let mut std = Vec::with_capacity(grid.len());
    for &x in &grid {
        let vals: Vec<f64> = series.iter().map(|(xs, ys)| interpolate(xs, ys, x)).collect();
        let (m, s) = mean_std(&vals);
        mean.push(m);
        std.push(s);
    }
    Curve { x: grid, mean, std }
}

fn load_run(dir: &Path) -> Result<(String, Vec<MetricsRow>)> {
    let text = std::fs::read_to_string(dir.join("config.json"))?;
    let cfg = RunConfig::from_json(&text)?;
    let rows = read_metrics(&dir.join("metrics.csv"))?;
    if rows.is_empty() {
        return Err(CoreError::Format(format!("{}: no metrics rows", dir.display())));
    }
    Ok((cfg.variant.name().to_string(), rows))
}

pub fn build(runs: &[PathBuf]) -> Result<PlotOutput> {
    if runs.is_empty() {
        return Err(CoreError::Config("plot needs at least one run directory".into()));
    }
    let mut by_variant: BTreeMap<String, Vec<Vec<MetricsRow>>> = BTreeMap::new();
    for dir in runs {
        let (v, rows) = load_run(dir)?;
        by_variant.entry(v).or_default().push(rows);
    }
    let mut out = PlotOutput {
        eval_curves: BTreeMap::new(),
        train_curves: BTreeMap::new(),
        summary: Vec::new(),
        warnings: Vec::new(),
    };
    for (variant, runs) in &by_variant {
        let train: Vec<(Vec<f64>, Vec<f64>)> = runs
            .iter()
            .map(|rows| (rows.iter().map(|r| r.attempt as f64).collect(), rows.iter().map(|r| r.train_success).collect()))
            .collect();
        let train_curve = band(&train, &mut out.warnings, variant);
        let evals: Vec<(Vec<f64>, Vec<f64>)> = runs
            .iter()
            .map(|rows| {
                let pts: Vec<&MetricsRow> = rows.iter().filter(|r| r.eval_success.is_some()).collect();
                (pts.iter().map(|r| r.attempt as f64).collect(), pts.iter().map(|r| r.eval_success.unwrap()).collect())
            })
            .filter(|(x, _): &(Vec<f64>, Vec<f64>)| !x.is_empty())
            .collect();
        let (final_eval_mean, final_eval_std) = if evals.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            out.eval_curves.insert(variant.clone(), band(&evals, &mut out.warnings, variant));
            // the summary uses each run's own final evaluation, not the resampled grid
            let finals: Vec<f64> = evals.iter().map(|(_, y)| *y.last().unwrap()).collect();
            mean_std(&finals)
        };
        out.summary.push(SummaryRow {
            variant: variant.clone(),
            runs: runs.len(),
            attempts: runs.iter().map(|r| r.last().unwrap().attempt).max().unwrap_or(0),
            final_eval_mean,
            final_eval_std,
            final_train_success_mean: *train_curve.mean.last().unwrap(),
        });
        out.train_curves.insert(variant.clone(), train_curve);
    }
    Ok(out)
}

const PALETTE: [&str; 7] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"];

pub fn svg(curves: &BTreeMap<String, Curve>, title: &str, ylabel: &str) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let xmax = curves.values().flat_map(|c| c.x.iter().copied()).fold(1.0, f64::max);
    let sx = |x: f64| m + x / xmax * (w - 2.0 * m);
    let sy = |y: f64| h - m - y.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{y0}" stroke="black"/>"#,
        y0 = h - m,
        x1 = w - m
    );
    for k in 0..=4 {
        let y = k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y:.2}</text>"#, m - 5.0, sy(y) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">grasp attempts (max {xmax})</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{ylabel}</text>"#, h / 2.0, h / 2.0);
    for (i, (name, c)) in curves.iter().enumerate() {
        let col = PALETTE[i % PALETTE.len()];
        let upper: Vec<String> = c.x.iter().zip(&c.mean).zip(&c.std).map(|((x, m), sd)| format!("{:.1},{:.1}", sx(*x), sy(m + sd))).collect();
        let lower: Vec<String> = c.x.iter().zip(&c.mean).zip(&c.std).rev().map(|((x, m), sd)| format!("{:.1},{:.1}", sx(*x), sy(m - sd))).collect();
        let _ = writeln!(s, r#"<polygon points="{} {}" fill="{col}" fill-opacity="0.2" stroke="none"/>"#, upper.join(" "), lower.join(" "));
        let line: Vec<String> = c.x.iter().zip(&c.mean).map(|(x, m)| format!("{:.1},{:.1}", sx(*x), sy(*m))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{col}" stroke-width="2"/>"#, line.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{col}">{name}</text>"#, w - m - 120.0, m + 16.0 * i as f64);
    }
    s.push_str("</svg>\n");
    s
}

/// Write `eval_success.svg`, `train_success.svg` and `summary.csv` into `out`.
pub fn emit_plots(runs: &[PathBuf], out: &Path) -> Result<PlotOutput> {
    let res = build(runs)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("eval_success.svg"), svg(&res.eval_curves, "Evaluation success", "success rate"))?;
    std::fs::write(out.join("train_success.svg"), svg(&res.train_curves, "Training success (moving average)", "success rate"))?;
    let mut w = csv::Writer::from_path(out.join("summary.csv")).map_err(|e| CoreError::Format(e.to_string()))?;
    for row in &res.summary {
        w.serialize(row).map_err(|e| CoreError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(res)
}
