//! Optimal ReLU thresholds under a Gaussian activation model.
//!
//! The expected SNN encoding of a ReLU with threshold θ and `N` levels is a
//! clipped, rounded staircase. Its squared error against the ReLU, weighted
//! by the activation density, is minimized by iterating `θ ← k₁(θ)·θ`, where
//! `k₁` is the optimal output gain at fixed θ.

use std::f64::consts::{FRAC_2_PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::ann::GaussianStats;
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::quadrature::{integrate_with_breaks, DEFAULT_MAX_SUBDIVISIONS};
use crate::special::erfc;

/// Absolute tolerance of every QE integral.
pub const QE_TOL: f64 = 1e-10;
/// Integration half-width in standard deviations.
pub const QE_SPAN: f64 = 8.0;
/// Lower clamp on the iterate.
pub const THETA_MIN: f64 = 1e-12;

/// Staircase expected encoding: `θ/N · clamp(⌊(Nx + θ/2)/θ⌋, 0, N)`.
pub fn quantizer_f(x: f64, theta: f64, n: u64) -> f64 {
    let nf = n as f64;
    theta / nf * ((nf * x + theta / 2.0) / theta).floor().clamp(0.0, nf)
}

/// Output amplitude scaled by `k`.
pub fn quantizer_f1(x: f64, theta: f64, k: f64, n: u64) -> f64 {
    k * quantizer_f(x, theta, n)
}

/// Decision threshold scaled by `k`, output levels unchanged.
pub fn quantizer_f2(x: f64, theta: f64, k: f64, n: u64) -> f64 {
    let nf = n as f64;
    let kt = k * theta;
    theta / nf * ((nf * x + kt / 2.0) / kt).floor().clamp(0.0, nf)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QeResult {
    pub value: f64,
    pub theta: f64,
}

fn check_model(theta: f64, sigma: f64, n: u64) -> Result<()> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::InvalidParam(format!("threshold {theta} must be positive")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParam(format!("sigma {sigma} must be positive")));
    }
    if n == 0 {
        return Err(Error::InvalidParam("quantization level count must be at least 1".into()));
    }
    Ok(())
}

/// Gaussian-weighted squared error of `f` against ReLU. `step` is the
/// spacing of `f`'s jump points `(j − ½)·step`.
fn weighted_error(f: impl Fn(f64) -> f64, step: f64, mu: f64, sigma: f64, n: u64) -> Result<f64> {
    let (lo, hi) = (mu - QE_SPAN * sigma, mu + QE_SPAN * sigma);
    let mut breaks = vec![lo];
    if lo < 0.0 && 0.0 < hi {
        breaks.push(0.0);
    }
    // only the jumps inside the window matter
    let first = ((lo / step + 0.5).ceil().max(1.0)) as u64;
    let last = ((hi / step + 0.5).floor().min(n as f64)).max(0.0) as u64;
    for j in first..=last {
        let b = (j as f64 - 0.5) * step;
        if b > lo && b < hi {
            breaks.push(b);
        }
    }
    breaks.push(hi);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let two_var = 2.0 * sigma * sigma;
    let r = integrate_with_breaks(
        |x| {
            let e = f(x) - x.max(0.0);
            e * e * (-(x - mu) * (x - mu) / two_var).exp()
        },
        &breaks,
        QE_TOL,
        DEFAULT_MAX_SUBDIVISIONS,
    )?;
    Ok(r.value.max(0.0))
}

pub fn qe_numeric(theta: f64, mu: f64, sigma: f64, n: u64) -> Result<QeResult> {
    check_model(theta, sigma, n)?;
    let value = weighted_error(|x| quantizer_f(x, theta, n), theta / n as f64, mu, sigma, n)?;
    Ok(QeResult { value, theta })
}

pub fn qe1_numeric(theta: f64, k: f64, mu: f64, sigma: f64, n: u64) -> Result<f64> {
    check_model(theta, sigma, n)?;
    weighted_error(|x| quantizer_f1(x, theta, k, n), theta / n as f64, mu, sigma, n)
}

pub fn qe2_numeric(theta: f64, k: f64, mu: f64, sigma: f64, n: u64) -> Result<f64> {
    check_model(theta, sigma, n)?;
    if !(k > 0.0) {
        return Err(Error::InvalidParam(format!("k = {k} must be positive")));
    }
    weighted_error(|x| quantizer_f2(x, theta, k, n), k * theta / n as f64, mu, sigma, n)
}

/// The gain `k` minimizing `QE₁(θ, k)` at fixed θ.
///
/// Written with `erfc` rather than `1 − erf` so that far-tail thresholds
/// (θ ≫ μ + σ or θ ≪ μ − σ) keep full relative precision.
pub fn k1_closed_form(theta: f64, mu: f64, sigma: f64, n: u64) -> Result<f64> {
    check_model(theta, sigma, n)?;
    let nf = n as f64;
    let (mut s_erfc, mut s_weighted, mut s_gauss) = (0.0, 0.0, 0.0);
    for i in 1..=n {
        let odd = (2 * i - 1) as f64;
        let a = odd * theta / (2.0 * nf);
        let z = (a - mu) / (SQRT_2 * sigma);
        let c = erfc(z);
        s_erfc += c;
        s_weighted += odd * c;
        s_gauss += (-z * z).exp();
    }
    let denom = s_weighted / (nf * nf);
    if !(denom > 1e-300) {
        return Err(Error::Degenerate(format!(
            "k1 denominator vanished at theta = {theta}, mu = {mu}, sigma = {sigma}"
        )));
    }
    let numer = mu * s_erfc / nf + sigma * FRAC_2_PI.sqrt() * s_gauss / nf;
    Ok(numer / (theta * denom))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IterationScheme {
    /// Plain fixed-point updates `θ ← k₁θ`.
    Plain,
    /// The same map with Aitken/Steffensen extrapolation every two updates.
    #[default]
    Accelerated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub quant_levels: u64,
    pub eps: f64,
    pub max_iters: usize,
    pub theta0: f64,
    #[serde(default)]
    pub scheme: IterationScheme,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            quant_levels: 8,
            eps: 1e-6,
            max_iters: 500,
            theta0: 1.0,
            scheme: IterationScheme::Accelerated,
        }
    }
}

impl SolverConfig {
    /// Level count of an `n`-threshold neuron run for `t` steps.
    pub fn levels_for(n_thresholds: u32, timesteps: usize) -> u64 {
        (1u64 << n_thresholds) * timesteps as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.quant_levels == 0 {
            return Err(Error::InvalidParam("quant_levels must be at least 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidParam(format!("eps = {} must be positive", self.eps)));
        }
        if !(self.theta0 > 0.0 && self.theta0.is_finite()) {
            return Err(Error::InvalidParam(format!("theta0 = {} must be positive", self.theta0)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParam("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationOutcome {
    pub theta: f64,
    pub k1: f64,
    pub iterations: usize,
    /// Every `(θ, k₁(θ))` evaluated, in order.
    pub trajectory: Vec<(f64, f64)>,
}

/// Finds θ* with `|k₁(θ*) − 1| < ε`.
///
/// The accelerated scheme keeps going until `|k₁ − 1|` is far below ε (or
/// stops improving), so that runs from different starting points agree on θ
/// to roughly ε rather than to ε divided by the contraction gap.
pub fn iterate_threshold(mu: f64, sigma: f64, cfg: &SolverConfig) -> Result<IterationOutcome> {
    cfg.validate()?;
    let n = cfg.quant_levels;
    let polish = cfg.eps * 1e-3;
    let mut trajectory = Vec::new();
    let eval = |theta: f64, trajectory: &mut Vec<(f64, f64)>| -> Result<f64> {
        let k = k1_closed_form(theta, mu, sigma, n)?;
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::Degenerate(format!(
                "k1 = {k} at theta = {theta} (mu = {mu}, sigma = {sigma})"
            )));
        }
        trajectory.push((theta, k));
        Ok(k)
    };

    let mut theta = cfg.theta0;
    let mut prev_gap = f64::INFINITY;
    for iter in 1..=cfg.max_iters {
        let k = eval(theta, &mut trajectory)?;
        let gap = (k - 1.0).abs();
        let done = match cfg.scheme {
            IterationScheme::Plain => gap < cfg.eps,
            IterationScheme::Accelerated => gap < polish || (gap < cfg.eps && gap >= prev_gap),
        };
        if done {
            return Ok(IterationOutcome {
                theta,
                k1: k,
                iterations: iter,
                trajectory,
            });
        }
        prev_gap = gap;
        let theta1 = (k * theta).max(THETA_MIN);
        theta = match cfg.scheme {
            IterationScheme::Plain => theta1,
            IterationScheme::Accelerated => {
                let theta2 = (eval(theta1, &mut trajectory)? * theta1).max(THETA_MIN);
                let curvature = theta2 - 2.0 * theta1 + theta;
                let jump = theta - (theta1 - theta) * (theta1 - theta) / curvature;
                if curvature != 0.0 && jump.is_finite() && jump > theta / 10.0 && jump < theta * 10.0 {
                    jump.max(THETA_MIN)
                } else {
                    theta2
                }
            }
        };
    }
    Err(Error::MaxIterations {
        iters: cfg.max_iters,
        last_k1: trajectory.last().map_or(f64::NAN, |p| p.1),
    })
}

/// Per-channel result of calibrating one insertion point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelCalibration {
    pub mu: f64,
    pub sigma: f64,
    pub theta: f64,
    pub iterations: usize,
    pub k1: f64,
}

/// Runs the iteration for every channel of `stats`.
pub fn calibrate_channels(
    stats: &GaussianStats,
    cfg: &SolverConfig,
    exec: Execution,
) -> Result<Vec<ChannelCalibration>> {
    let channels: Vec<(f64, f64)> = stats.mean.iter().copied().zip(stats.std.iter().copied()).collect();
    par::try_map(exec, &channels, |&(mu, sigma)| {
        let out = iterate_threshold(mu, sigma, cfg)?;
        Ok(ChannelCalibration {
            mu,
            sigma,
            theta: out.theta,
            iterations: out.iterations,
            k1: out.k1,
        })
    })
}

/// Golden-section minimizer of `f` on `[a, b]`, to an absolute width `tol`.
pub fn golden_section(f: impl Fn(f64) -> Result<f64>, mut a: f64, mut b: f64, tol: f64) -> Result<f64> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok(0.5 * (a + b))
}

/// Argmin of `f` over `grid` (ascending), refined by golden section within
/// the bracket formed by the neighbouring grid points.
pub fn grid_argmin(
    f: impl Fn(f64) -> Result<f64> + Sync + Send,
    grid: &[f64],
    refine_tol: Option<f64>,
    exec: Execution,
) -> Result<f64> {
    let values = par::try_map(exec, grid, |&x| f(x))?;
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidParam("empty grid".into()))?;
    match refine_tol {
        None => Ok(grid[best]),
        Some(tol) => {
            let lo = grid[best.saturating_sub(1)];
            let hi = grid[(best + 1).min(grid.len() - 1)];
            golden_section(f, lo, hi, tol)
        }
    }
}

/// `count` points log-spaced over `[lo, hi]`, endpoints included.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}
