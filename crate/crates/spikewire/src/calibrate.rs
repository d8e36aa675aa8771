//! Per-layer threshold calibration on a dataset.
//!
//! ReLU networks get thresholds from the fixed-point iteration on the
//! Gaussian fit of each ReLU input. Every other insertion point, and every
//! point of a network with other nonlinearities, gets `c` times a
//! percentile of the observed activations.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ann::stats::{collect_relu_stats, percentile_thresholds};
use crate::ann::{AnnGraph, Granularity, Sample};
use crate::convert::{insertion_points, Provenance, ThresholdSpec, Thresholds};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::threshold::{calibrate_channels, ChannelCalibration, SolverConfig};

pub const CALIBRATION_SCHEMA: &str = "spikewire.calibration/1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Iteration for ReLU networks, percentile otherwise.
    #[default]
    Auto,
    Iteration,
    Percentile,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Method::Auto),
            "iteration" => Ok(Method::Iteration),
            "percentile" => Ok(Method::Percentile),
            _ => Err(Error::InvalidParam(format!(
                "unknown calibration method `{s}` (expected auto, iteration or percentile)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub method: Method,
    pub n_thresholds: u32,
    pub timesteps: usize,
    /// Solver settings; its level count is replaced by `2ⁿ·T` unless
    /// `quant_levels` is set.
    pub solver: SolverConfig,
    pub quant_levels: Option<u64>,
    pub p: f64,
    pub c: f64,
    pub granularity: Granularity,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            method: Method::Auto,
            n_thresholds: 4,
            timesteps: 64,
            solver: SolverConfig::default(),
            quant_levels: None,
            p: 0.999,
            c: 1.0,
            granularity: Granularity::PerTensor,
        }
    }
}

impl CalibrationConfig {
    pub fn effective_solver(&self) -> SolverConfig {
        SolverConfig {
            quant_levels: self
                .quant_levels
                .unwrap_or_else(|| SolverConfig::levels_for(self.n_thresholds, self.timesteps)),
            ..self.solver
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub key: String,
    pub source: String,
    pub rectify: bool,
    pub thetas: Vec<f64>,
    pub provenance: Provenance,
    /// Per-channel solver results (iteration only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<ChannelCalibration>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema: String,
    /// Method actually applied (never `auto`).
    pub method: Method,
    pub n_thresholds: u32,
    pub timesteps: usize,
    pub samples: usize,
    pub points: Vec<PointReport>,
}

impl CalibrationReport {
    pub fn thresholds(&self) -> Thresholds {
        self.points
            .iter()
            .map(|p| {
                (
                    p.key.clone(),
                    ThresholdSpec {
                        thetas: p.thetas.clone(),
                        provenance: p.provenance.clone(),
                    },
                )
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema != CALIBRATION_SCHEMA {
            return Err(Error::Format(format!(
                "expected schema `{CALIBRATION_SCHEMA}`, found `{}`",
                r.schema
            )));
        }
        Ok(r)
    }
}

/// Chooses a threshold for every insertion point of `graph`.
pub fn calibrate(
    graph: &AnnGraph,
    dataset: &[Sample],
    cfg: &CalibrationConfig,
    exec: Execution,
) -> Result<CalibrationReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.n_thresholds == 0 || cfg.timesteps == 0 {
        return Err(Error::InvalidParam("n_thresholds and timesteps must be at least 1".into()));
    }
    let relu_net = graph.is_relu_network();
    let method = match cfg.method {
        Method::Auto if relu_net => Method::Iteration,
        Method::Auto => Method::Percentile,
        Method::Iteration if !relu_net => {
            return Err(Error::InvalidParam(
                "threshold iteration models ReLU inputs; this network has other nonlinearities, use percentile".into(),
            ))
        }
        m => m,
    };
    let points = insertion_points(graph);
    let solver = cfg.effective_solver();
    solver.validate()?;

    let iterated: Vec<_> = points.iter().filter(|p| method == Method::Iteration && p.rectify).collect();
    let stats = if iterated.is_empty() {
        BTreeMap::new()
    } else {
        collect_relu_stats(graph, dataset, exec)?
    };
    let percentile_sources: Vec<String> = points
        .iter()
        .filter(|p| !(method == Method::Iteration && p.rectify))
        .map(|p| if p.rectify { graph.node(&p.source).map(|n| n.inputs[0].clone()) } else { Ok(p.source.clone()) })
        .collect::<Result<_>>()?;
    let percentiles = if percentile_sources.is_empty() {
        BTreeMap::new()
    } else {
        percentile_thresholds(graph, dataset, &percentile_sources, cfg.p, cfg.c, cfg.granularity, exec)?
    };

    let mut reports = Vec::with_capacity(points.len());
    let mut next_percentile = percentile_sources.iter();
    for point in &points {
        let report = if method == Method::Iteration && point.rectify {
            let channels = calibrate_channels(&stats[&point.source], &solver, exec)?;
            PointReport {
                key: point.key.clone(),
                source: point.source.clone(),
                rectify: true,
                thetas: channels.iter().map(|c| c.theta).collect(),
                provenance: Provenance::Iteration {
                    quant_levels: solver.quant_levels,
                    eps: solver.eps,
                },
                channels: Some(channels),
            }
        } else {
            let src = next_percentile.next().unwrap();
            PointReport {
                key: point.key.clone(),
                source: point.source.clone(),
                rectify: point.rectify,
                thetas: percentiles[src].clone(),
                provenance: Provenance::Percentile { p: cfg.p, c: cfg.c },
                channels: None,
            }
        };
        reports.push(report);
    }
    Ok(CalibrationReport {
        schema: CALIBRATION_SCHEMA.into(),
        method,
        n_thresholds: cfg.n_thresholds,
        timesteps: cfg.timesteps,
        samples: dataset.len(),
        points: reports,
    })
}
