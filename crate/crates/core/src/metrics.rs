//! Distribution-quality metrics over simulated ensembles: mean calibration,
//! volatility, and interval coverage.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{GlimError, Issue, Result};
use crate::path::{realized_volatility, EnsembleEntry, PathDataset, SimulationEnsemble};

pub const DEFAULT_ALPHAS: [f64; 4] = [0.5, 0.8, 0.9, 0.95];

/// Fewest samples per path for coverage intervals.
pub const MIN_COVERAGE_SAMPLES: usize = 20;

/// `{1, ceil(T/2), T-1}` with duplicates removed; empty when `T < 2`.
pub fn default_checkpoints(horizon: usize) -> Vec<usize> {
    if horizon < 2 {
        return Vec::new();
    }
    let mut out = vec![1, horizon.div_ceil(2), horizon - 1];
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMse {
    /// Entry `t - 1` covers step `t = 1..T`.
    pub per_t: Vec<f64>,
    pub aggregate: f64,
}

fn check_ensemble(ens: &SimulationEnsemble, min_samples: usize) -> Result<()> {
    if ens.is_empty() {
        return Err(GlimError::InvalidArgument("ensemble is empty".into()));
    }
    let m = ens.min_samples();
    if m < min_samples {
        return Err(GlimError::InvalidArgument(format!(
            "need at least {min_samples} samples per path, found a path with {m}"
        )));
    }
    Ok(())
}

/// Per step, the mean over paths of `(mean_s y_t - y_0)^2`.
pub fn mean_calibration_mse(ens: &SimulationEnsemble) -> Result<CalibrationMse> {
    check_ensemble(ens, 2)?;
    let horizon = ens.horizon();
    let mut per_t = vec![0.0; horizon];
    for e in ens.entries() {
        let m = e.samples.len() as f64;
        for (t, acc) in per_t.iter_mut().enumerate() {
            let mean = e.samples.iter().map(|s| s[t + 1]).sum::<f64>() / m;
            *acc += (mean - e.y0).powi(2);
        }
    }
    let n = ens.len() as f64;
    for v in &mut per_t {
        *v /= n;
    }
    let aggregate = per_t.iter().sum::<f64>() / horizon as f64;
    Ok(CalibrationMse { per_t, aggregate })
}

/// Expected calibration MSE of an exact simulator from sampling noise
/// alone: the mean over paths and steps of `Var_s(y_t) / M`.
pub fn calibration_noise_floor(ens: &SimulationEnsemble) -> Result<f64> {
    check_ensemble(ens, 2)?;
    let horizon = ens.horizon();
    let mut total = 0.0;
    for e in ens.entries() {
        let m = e.samples.len() as f64;
        for t in 1..=horizon {
            let mean = e.samples.iter().map(|s| s[t]).sum::<f64>() / m;
            let var = e.samples.iter().map(|s| (s[t] - mean).powi(2)).sum::<f64>() / (m - 1.0);
            total += var / m;
        }
    }
    Ok(total / (ens.len() * horizon) as f64)
}

fn volatility_mse_entries(entries: &[EnsembleEntry]) -> Result<f64> {
    if entries.is_empty() {
        return Err(GlimError::InvalidArgument("ensemble is empty".into()));
    }
    let mut total = 0.0;
    for e in entries {
        if e.samples.is_empty() {
            return Err(GlimError::InvalidArgument(format!("path '{}' has no samples", e.path_id)));
        }
        let mut q = 0.0;
        for s in &e.samples {
            q += realized_volatility(s)?;
        }
        q /= e.samples.len() as f64;
        total += (q - e.y0 * (1.0 - e.y0)).powi(2);
    }
    Ok(total / entries.len() as f64)
}

/// Mean over paths of `(mean_s Q_T - y_0 (1 - y_0))^2`.
pub fn volatility_mse(ens: &SimulationEnsemble) -> Result<f64> {
    volatility_mse_entries(ens.entries())
}

/// Value at nearest rank `ceil(q M)` of an ascending sample.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let m = sorted.len();
    let rank = ((q * m as f64) - 1e-9).ceil().clamp(1.0, m as f64) as usize;
    sorted[rank - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub t: usize,
    pub alpha: f64,
    pub coverage: f64,
    /// `coverage - alpha`; positive means intervals are too wide.
    pub error: f64,
}

/// Fraction of observed paths whose `y_t` lies inside their own central
/// `alpha` interval of simulated `y_t`, per checkpoint and level.
pub fn ci_coverage_error(
    ens: &SimulationEnsemble,
    observed: &PathDataset,
    checkpoints: &[usize],
    alphas: &[f64],
) -> Result<Vec<CoverageCell>> {
    check_ensemble(ens, MIN_COVERAGE_SAMPLES)?;
    let horizon = ens.horizon();
    if observed.horizon() != horizon {
        return Err(GlimError::InvalidArgument(format!(
            "ensemble horizon {horizon} differs from observed horizon {}",
            observed.horizon()
        )));
    }
    if let Some(t) = checkpoints.iter().find(|&&t| t == 0 || t >= horizon) {
        return Err(GlimError::InvalidArgument(format!(
            "checkpoint {t} must lie strictly between 0 and {horizon}"
        )));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(GlimError::InvalidArgument(format!("coverage level {a} must lie in (0, 1)")));
    }
    let pairs = match_paths(ens, observed)?;
    let mut cells = Vec::with_capacity(checkpoints.len() * alphas.len());
    for &t in checkpoints {
        let sorted: Vec<Vec<f64>> = pairs
            .iter()
            .map(|(e, _)| {
                let mut v: Vec<f64> = e.samples.iter().map(|s| s[t]).collect();
                v.sort_by(f64::total_cmp);
                v
            })
            .collect();
        for &alpha in alphas {
            let lo_q = (1.0 - alpha) / 2.0;
            let hi_q = (1.0 + alpha) / 2.0;
            let hits = pairs
                .iter()
                .zip(&sorted)
                .filter(|((_, y), s)| {
                    let v = y[t];
                    nearest_rank(s, lo_q) <= v && v <= nearest_rank(s, hi_q)
                })
                .count();
            let coverage = hits as f64 / pairs.len() as f64;
            cells.push(CoverageCell {
                t,
                alpha,
                coverage,
                error: coverage - alpha,
            });
        }
    }
    Ok(cells)
}

/// Pairs each ensemble entry with its observed values; ids must match both ways.
fn match_paths<'a>(ens: &'a SimulationEnsemble, observed: &'a PathDataset) -> Result<Vec<(&'a EnsembleEntry, &'a [f64])>> {
    let by_id: HashMap<&str, &[f64]> = observed.paths().iter().map(|p| (p.id(), p.values())).collect();
    let mut issues = Vec::new();
    let mut pairs = Vec::with_capacity(ens.len());
    let mut seen = HashSet::new();
    for e in ens.entries() {
        seen.insert(e.path_id.as_str());
        match by_id.get(e.path_id.as_str()) {
            Some(y) => pairs.push((e, *y)),
            None => issues.push(Issue {
                path_id: e.path_id.clone(),
                index: None,
                message: "simulated but not observed".into(),
            }),
        }
    }
    for p in observed.paths() {
        if !seen.contains(p.id()) {
            issues.push(Issue {
                path_id: p.id().to_string(),
                index: None,
                message: "observed but not simulated".into(),
            });
        }
    }
    if !issues.is_empty() {
        return Err(GlimError::Validation(issues));
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizon: usize,
    pub n_paths: usize,
    /// Smallest number of samples per path.
    pub m: usize,
    pub mean_calibration_mse: CalibrationMse,
    pub calibration_noise_floor: f64,
    pub volatility_mse: f64,
    pub ci_coverage: Vec<CoverageCell>,
}

impl MetricsReport {
    /// Rows of `metric,t,alpha,value`; fields that do not apply are empty.
    pub fn csv_rows(&self) -> Vec<[String; 4]> {
        let mut rows = Vec::new();
        for (k, v) in self.mean_calibration_mse.per_t.iter().enumerate() {
            rows.push(["mean_calibration_mse".into(), (k + 1).to_string(), String::new(), v.to_string()]);
        }
        rows.push([
            "mean_calibration_mse".into(),
            String::new(),
            String::new(),
            self.mean_calibration_mse.aggregate.to_string(),
        ]);
        rows.push([
            "calibration_noise_floor".into(),
            String::new(),
            String::new(),
            self.calibration_noise_floor.to_string(),
        ]);
        rows.push(["volatility_mse".into(), String::new(), String::new(), self.volatility_mse.to_string()]);
        for c in &self.ci_coverage {
            rows.push(["ci_coverage_error".into(), c.t.to_string(), c.alpha.to_string(), c.error.to_string()]);
        }
        rows
    }
}

pub fn evaluate(
    ens: &SimulationEnsemble,
    observed: &PathDataset,
    checkpoints: &[usize],
    alphas: &[f64],
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        horizon: ens.horizon(),
        n_paths: ens.len(),
        m: ens.min_samples(),
        mean_calibration_mse: mean_calibration_mse(ens)?,
        calibration_noise_floor: calibration_noise_floor(ens)?,
        volatility_mse: volatility_mse(ens)?,
        ci_coverage: ci_coverage_error(ens, observed, checkpoints, alphas)?,
    })
}
