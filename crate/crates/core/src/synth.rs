//! Synthetic datasets drawn from the model itself, and the parameter
//! recovery experiment built on them.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{build_sigma, CovarianceSpec, VarianceFn};
use crate::error::{GlimError, Result};
use crate::glim::{ConditioningCache, GlimPathModel};
use crate::inference::{fit_mle_prepared, fit_posterior_prepared, FitConfig, FitMode, PreparedDataset};
use crate::path::{PathDataset, ProbabilityPath, DEFAULT_CLAMP};
use crate::seed::{stream_rng, stream_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateScheme {
    /// Every covariate is 1.
    Constant1,
    /// Covariates are 1 on odd-numbered paths and 0 otherwise.
    BinaryHalf,
}

impl CovariateScheme {
    fn value(self, index: usize) -> f64 {
        match self {
            CovariateScheme::Constant1 => 1.0,
            CovariateScheme::BinaryHalf => (index % 2) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub horizon: usize,
    pub y0: f64,
    pub beta: Vec<f64>,
    pub rho: f64,
    pub n_paths: usize,
    pub scheme: CovariateScheme,
    pub variance_fn: VarianceFn,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            horizon: 10,
            y0: 0.75,
            beta: vec![0.0],
            rho: 0.0,
            n_paths: 500,
            scheme: CovariateScheme::Constant1,
            variance_fn: VarianceFn::ExpLinear,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(GlimError::InvalidArgument("n_paths must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(GlimError::InvalidArgument("horizon must be positive".into()));
        }
        if !(self.y0 > 0.0 && self.y0 < 1.0) {
            return Err(GlimError::InvalidArgument(format!("y0 must lie in (0, 1), got {}", self.y0)));
        }
        self.covariance().map(|_| ())
    }

    pub fn covariance(&self) -> Result<CovarianceSpec> {
        CovarianceSpec::new(self.rho, self.beta.clone(), self.variance_fn.clone())
    }

    pub fn covariate_names(&self) -> Vec<String> {
        match self.beta.len() {
            1 => vec!["x".to_string()],
            k => (1..=k).map(|i| format!("x{i}")).collect(),
        }
    }
}

/// Draws `n_paths` resolved paths; each path has its own stream keyed by its id.
pub fn generate_dataset(spec: &SynthSpec) -> Result<PathDataset> {
    spec.validate()?;
    let theta = spec.covariance()?;
    let arity = spec.beta.len();
    let schemes = [spec.scheme.value(0), spec.scheme.value(1)];
    let models: Vec<GlimPathModel> = schemes
        .iter()
        .map(|&v| {
            let sigma = build_sigma(&theta, &vec![v; arity], spec.horizon)?;
            GlimPathModel::for_start(Arc::new(ConditioningCache::new(sigma)?), spec.y0, DEFAULT_CLAMP)
        })
        .collect::<Result<_>>()?;
    let paths: Vec<ProbabilityPath> = (0..spec.n_paths)
        .into_par_iter()
        .map(|i| {
            let id = format!("p{i}");
            let mut rng = stream_rng(spec.seed, "synth", &id);
            let y = models[i % 2].sample_path(&mut rng);
            ProbabilityPath::new(id, y, vec![spec.scheme.value(i); arity])
        })
        .collect::<Result<_>>()?;
    PathDataset::from_paths(spec.covariate_names(), paths)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryConfig {
    pub betas: Vec<f64>,
    pub rhos: Vec<f64>,
    pub replicates: usize,
    pub paths_per_set: usize,
    pub horizon: usize,
    pub y0: f64,
    pub scheme: CovariateScheme,
    /// Fit settings; `fit.mode` picks MLE or posterior means.
    pub fit: FitConfig,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            betas: vec![-0.4, 0.0, 0.4],
            rhos: vec![-0.4, 0.0, 0.4],
            replicates: 10,
            paths_per_set: 500,
            horizon: 5,
            y0: 0.75,
            scheme: CovariateScheme::Constant1,
            fit: FitConfig::default(),
            seed: 0,
        }
    }
}

impl RecoveryConfig {
    /// The full 5x5 grid with 50 replicates of length-10 paths.
    pub fn full() -> Self {
        let grid = vec![-0.4, -0.2, 0.0, 0.2, 0.4];
        RecoveryConfig {
            betas: grid.clone(),
            rhos: grid,
            replicates: 50,
            horizon: 10,
            ..RecoveryConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCell {
    pub beta_true: f64,
    pub rho_true: f64,
    pub beta_hat_mean: f64,
    pub beta_hat_sd: f64,
    pub rho_hat_mean: f64,
    pub rho_hat_sd: f64,
    pub n_ok: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub replicates: usize,
    pub paths_per_set: usize,
    pub horizon: usize,
    pub mode: FitMode,
    pub cells: Vec<RecoveryCell>,
}

impl RecoveryReport {
    pub const CSV_HEADER: [&'static str; 7] = [
        "beta_true",
        "rho_true",
        "beta_hat_mean",
        "beta_hat_sd",
        "rho_hat_mean",
        "rho_hat_sd",
        "n_ok",
    ];

    pub fn csv_rows(&self) -> Vec<[String; 7]> {
        self.cells
            .iter()
            .map(|c| {
                [
                    c.beta_true.to_string(),
                    c.rho_true.to_string(),
                    c.beta_hat_mean.to_string(),
                    c.beta_hat_sd.to_string(),
                    c.rho_hat_mean.to_string(),
                    c.rho_hat_sd.to_string(),
                    c.n_ok.to_string(),
                ]
            })
            .collect()
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// For every grid cell and replicate: generate, fit, record. Fit failures are
/// kept per cell.
pub fn run_recovery(config: &RecoveryConfig) -> Result<RecoveryReport> {
    if config.betas.is_empty() || config.rhos.is_empty() {
        return Err(GlimError::InvalidArgument("recovery grid is empty".into()));
    }
    if config.replicates == 0 {
        return Err(GlimError::InvalidArgument("replicates must be positive".into()));
    }
    if let Some(r) = config.rhos.iter().find(|r| !(r.abs() < 1.0)) {
        return Err(GlimError::InvalidArgument(format!("grid rho {r} is outside (-1, 1)")));
    }
    let cells: Vec<(f64, f64)> = config
        .betas
        .iter()
        .flat_map(|&b| config.rhos.iter().map(move |&r| (b, r)))
        .collect();
    let tasks: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..config.replicates).map(move |r| (c, r)))
        .collect();
    let outcomes: Vec<Result<(f64, f64)>> = tasks
        .par_iter()
        .map(|&(c, r)| {
            let (beta, rho) = cells[c];
            let key = format!("{c}-{r}");
            let spec = SynthSpec {
                horizon: config.horizon,
                y0: config.y0,
                beta: vec![beta],
                rho,
                n_paths: config.paths_per_set,
                scheme: config.scheme,
                variance_fn: VarianceFn::ExpLinear,
                seed: stream_seed(config.seed, "recover-data", &key),
            };
            let data = generate_dataset(&spec)?;
            let prepared = PreparedDataset::new(&data, config.fit.clamp, config.fit.saturation)?;
            let fit_config = FitConfig {
                seed: stream_seed(config.seed, "recover-fit", &key),
                variance_fn: VarianceFn::ExpLinear,
                ..config.fit.clone()
            };
            let fit = match fit_config.mode {
                FitMode::Mle => fit_mle_prepared(&prepared, &fit_config)?,
                FitMode::Mcmc => fit_posterior_prepared(&prepared, &fit_config)?,
            };
            Ok((fit.point.beta[0], fit.point.rho))
        })
        .collect();

    let mut report_cells = Vec::with_capacity(cells.len());
    for (c, &(beta_true, rho_true)) in cells.iter().enumerate() {
        let mut betas = Vec::new();
        let mut rhos = Vec::new();
        let mut failures = Vec::new();
        for (k, &(tc, r)) in tasks.iter().enumerate() {
            if tc != c {
                continue;
            }
            match &outcomes[k] {
                Ok((b, rho)) => {
                    betas.push(*b);
                    rhos.push(*rho);
                }
                Err(e) => failures.push(format!("replicate {r}: {e}")),
            }
        }
        let (beta_hat_mean, beta_hat_sd) = mean_sd(&betas);
        let (rho_hat_mean, rho_hat_sd) = mean_sd(&rhos);
        report_cells.push(RecoveryCell {
            beta_true,
            rho_true,
            beta_hat_mean,
            beta_hat_sd,
            rho_hat_mean,
            rho_hat_sd,
            n_ok: betas.len(),
            failures,
        });
    }
    Ok(RecoveryReport {
        replicates: config.replicates,
        paths_per_set: config.paths_per_set,
        horizon: config.horizon,
        mode: config.fit.mode,
        cells: report_cells,
    })
}
