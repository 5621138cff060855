//! One-axis sweeps over support size, open-class count or the noise pair,
//! with CSV tables and SVG line plots.

use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EvalMode, ExperimentConfig};
use crate::data::{ClassSplits, DatasetRegistry};
use crate::error::{DafosError, Result};
use crate::eval::{evaluate, synthetic_kl};
use crate::trainer::{train, Model};

/// The six `(σ_L, σ_H)` operating points of the noise ablation.
pub const SIGMA_GRID: [(f64, f64); 6] = [(0.4, 0.8), (0.5, 0.8), (0.7, 0.8), (0.3, 0.9), (0.1, 1.0), (0.4, 1.2)];

/// Episodes used for the KL column of a sigma sweep.
pub const KL_EPISODES: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub enum SweepValues {
    Shots(Vec<usize>),
    OpenClasses(Vec<usize>),
    Sigma(Vec<(f64, f64)>),
}

impl SweepValues {
    pub fn axis(&self) -> &'static str {
        match self {
            Self::Shots(_) => "shots",
            Self::OpenClasses(_) => "open_classes",
            Self::Sigma(_) => "sigma",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Shots(v) | Self::OpenClasses(v) => v.len(),
            Self::Sigma(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses `1,5` style lists; sigma pairs are written `low:high`. An empty
    /// sigma list selects [`SIGMA_GRID`].
    pub fn parse(axis: &str, text: &str) -> Result<Self> {
        let items: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        let ints = || -> Result<Vec<usize>> {
            items
                .iter()
                .map(|s| s.parse().map_err(|_| DafosError::config("sweep.values", format!("`{s}` is not a count"))))
                .collect()
        };
        match axis {
            "shots" => Ok(Self::Shots(ints()?)),
            "open_classes" | "open-classes" => Ok(Self::OpenClasses(ints()?)),
            "sigma" if items.is_empty() => Ok(Self::Sigma(SIGMA_GRID.to_vec())),
            "sigma" => items
                .iter()
                .map(|s| {
                    let bad = || DafosError::config("sweep.values", format!("`{s}` is not a low:high pair"));
                    let (a, b) = s.split_once(':').ok_or_else(bad)?;
                    Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
                })
                .collect::<Result<_>>()
                .map(Self::Sigma),
            other => Err(DafosError::config(
                "sweep.axis",
                format!("unknown axis `{other}` (shots, open_classes, sigma)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    /// Plot abscissa: the count, or the grid position for sigma pairs.
    pub x: f64,
    pub acc: f64,
    pub acc_std: f64,
    pub auroc: f64,
    pub auroc_std: f64,
    pub kl: Option<f64>,
}

/// Runs the sweep. Count axes reuse `model` (training one first when absent);
/// the sigma axis trains a fresh model per point.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    registry: &DatasetRegistry,
    splits: &ClassSplits,
    values: &SweepValues,
    model: Option<&Model>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(DafosError::config("sweep.values", "at least one value is required"));
    }
    let mut cfg = cfg.clone();
    cfg.eval.mode = EvalMode::Standard;
    let row = |cfg: &ExperimentConfig, model: &Model, value: String, x: f64, kl: Option<f64>| -> Result<SweepRow> {
        let r = evaluate(model, registry, splits, cfg)?.report;
        Ok(SweepRow {
            axis: values.axis().into(),
            value,
            x,
            acc: r.acc_mean,
            acc_std: r.acc_std,
            auroc: r.auroc_mean,
            auroc_std: r.auroc_std,
            kl,
        })
    };
    let mut rows = Vec::with_capacity(values.len());
    match values {
        SweepValues::Shots(v) | SweepValues::OpenClasses(v) => {
            let trained;
            let model = match model {
                Some(m) => m,
                None => {
                    trained = train(registry, splits, &cfg, None)?.0;
                    &trained
                }
            };
            for &n in v {
                let mut c = cfg.clone();
                match values {
                    SweepValues::Shots(_) => c.eval.shots = n,
                    _ => c.eval.unknown = n,
                }
                c.validate()?;
                rows.push(row(&c, model, n.to_string(), n as f64, None)?);
            }
        }
        SweepValues::Sigma(v) => {
            for (i, &(lo, hi)) in v.iter().enumerate() {
                let mut c = cfg.clone();
                c.gan.sigma_low = lo;
                c.gan.sigma_high = hi;
                c.validate()?;
                let (m, _) = train(registry, splits, &c, None)?;
                let kl = synthetic_kl(&m, registry, splits, &c, KL_EPISODES.min(c.eval.episodes))?;
                rows.push(row(&c, &m, format!("{lo}:{hi}"), (i + 1) as f64, Some(kl))?);
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| DafosError::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn plot_error(e: impl std::fmt::Display) -> DafosError {
    DafosError::InvalidArgument(format!("plot: {e}"))
}

/// Line plot of Acc and AUROC (percent) against the sweep axis.
pub fn plot_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(DafosError::InvalidArgument("plot: no rows".into()));
    }
    let axis = rows[0].axis.clone();
    let (xmin, xmax) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.x), b.max(r.x)));
    let pad = ((xmax - xmin) * 0.1).max(0.5);
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Acc / AUROC vs {axis}"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d((xmin - pad)..(xmax + pad), 0f64..100f64)
        .map_err(plot_error)?;
    let labels: Vec<(f64, String)> = rows.iter().map(|r| (r.x, r.value.clone())).collect();
    chart
        .configure_mesh()
        .x_desc(axis.as_str())
        .y_desc("%")
        .x_label_formatter(&|x| {
            labels
                .iter()
                .find(|(v, _)| (v - x).abs() < 1e-9)
                .map(|(_, l)| l.clone())
                .unwrap_or_default()
        })
        .draw()
        .map_err(plot_error)?;
    for (name, color, get) in [
        ("Acc", BLUE, (|r: &SweepRow| r.acc) as fn(&SweepRow) -> f64),
        ("AUROC", RED, |r: &SweepRow| r.auroc),
    ] {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.x, get(r))).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color))
            .map_err(plot_error)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_error)?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE)
        .draw()
        .map_err(plot_error)?;
    root.present().map_err(plot_error)
}
