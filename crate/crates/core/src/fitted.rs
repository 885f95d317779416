//! Fitted models of any kind, their file format, and ensemble simulation.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{lr_fit, lr_sample, mmfe_fit, mmfe_sample, LrModel, MmfeModel};
use crate::covariance::{build_sigma, CovarianceSpec};
use crate::error::{GlimError, Result};
use crate::glim::{ConditioningCache, GlimPathModel};
use crate::inference::{fit, FitConfig, FitResult};
use crate::path::{EnsembleEntry, PathDataset, ProbabilityPath, SimulationEnsemble};
use crate::seed::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Glim,
    Mmfe,
    Lr,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Glim => "glim",
            ModelKind::Mmfe => "mmfe",
            ModelKind::Lr => "lr",
        }
    }
}

/// Contents of a fit file, tagged by `"model"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum FittedModel {
    Glim {
        horizon: usize,
        covariate_names: Vec<String>,
        clamp: f64,
        fit: FitResult,
    },
    Mmfe {
        clamp: f64,
        increments: MmfeModel,
    },
    Lr {
        clamp: f64,
        regression: LrModel,
    },
}

impl FittedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            FittedModel::Glim { .. } => ModelKind::Glim,
            FittedModel::Mmfe { .. } => ModelKind::Mmfe,
            FittedModel::Lr { .. } => ModelKind::Lr,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            FittedModel::Glim { horizon, .. } => *horizon,
            FittedModel::Mmfe { increments, .. } => increments.horizon(),
            FittedModel::Lr { regression, .. } => regression.horizon,
        }
    }

    fn clamp(&self) -> f64 {
        match self {
            FittedModel::Glim { clamp, .. } | FittedModel::Mmfe { clamp, .. } | FittedModel::Lr { clamp, .. } => *clamp,
        }
    }
}

pub fn fit_model(kind: ModelKind, data: &PathDataset, config: &FitConfig) -> Result<FittedModel> {
    Ok(match kind {
        ModelKind::Glim => FittedModel::Glim {
            horizon: data.horizon(),
            covariate_names: data.covariate_names().to_vec(),
            clamp: config.clamp,
            fit: fit(data, config)?,
        },
        ModelKind::Mmfe => FittedModel::Mmfe {
            clamp: config.clamp,
            increments: mmfe_fit(data)?,
        },
        ModelKind::Lr => FittedModel::Lr {
            clamp: config.clamp,
            regression: lr_fit(data)?,
        },
    })
}

fn glim_sample<R: Rng>(spec: &CovarianceSpec, path: &ProbabilityPath, clamp: f64, rng: &mut R) -> Result<Vec<f64>> {
    let sigma = build_sigma(spec, path.covariates(), path.horizon())?;
    let model = GlimPathModel::for_start(Arc::new(ConditioningCache::new(sigma)?), path.y0(), clamp)?;
    Ok(model.sample_path(rng))
}

fn simulate_path(model: &FittedModel, path: &ProbabilityPath, samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = stream_rng(seed, "simulate", path.id());
    let clamp = model.clamp();
    let y0 = path.y0();
    let mut out = Vec::with_capacity(samples);
    match model {
        FittedModel::Glim { fit, .. } => match &fit.draws {
            Some(draws) if !draws.is_empty() => {
                for _ in 0..samples {
                    let theta = &draws[rng.random_range(0..draws.len())];
                    out.push(glim_sample(theta, path, clamp, &mut rng)?);
                }
            }
            _ => {
                let sigma = build_sigma(&fit.point, path.covariates(), path.horizon())?;
                let m = GlimPathModel::for_start(Arc::new(ConditioningCache::new(sigma)?), y0, clamp)?;
                for _ in 0..samples {
                    out.push(m.sample_path(&mut rng));
                }
            }
        },
        FittedModel::Mmfe { increments, .. } => {
            for _ in 0..samples {
                out.push(mmfe_sample(increments, y0, clamp, &mut rng));
            }
        }
        FittedModel::Lr { regression, .. } => {
            for _ in 0..samples {
                out.push(lr_sample(regression, y0, path.covariates(), clamp, &mut rng)?);
            }
        }
    }
    // Start every sample exactly at the observed value.
    for s in &mut out {
        s[0] = y0;
    }
    Ok(out)
}

/// `samples` simulated paths per observed path, each path on its own
/// stream keyed by its id. Posterior fits draw a parameter per sample.
pub fn simulate_ensemble(model: &FittedModel, observed: &PathDataset, samples: usize, seed: u64) -> Result<SimulationEnsemble> {
    if samples < 2 {
        return Err(GlimError::InvalidArgument(format!("need at least 2 samples per path, got {samples}")));
    }
    if model.horizon() != observed.horizon() {
        return Err(GlimError::Input(format!(
            "fitted horizon {} differs from observed horizon {}",
            model.horizon(),
            observed.horizon()
        )));
    }
    match model {
        FittedModel::Glim { covariate_names, .. } if covariate_names.as_slice() != observed.covariate_names() => {
            return Err(GlimError::Input(format!(
                "fit used covariates [{}] but the data has [{}]",
                covariate_names.join(", "),
                observed.covariate_names().join(", ")
            )));
        }
        FittedModel::Lr { regression, .. } if regression.columns.len() != observed.covariate_names().len() + 2 => {
            return Err(GlimError::Input("covariate count differs from the regression design".into()));
        }
        _ => {}
    }
    let entries: Vec<EnsembleEntry> = observed
        .paths()
        .par_iter()
        .map(|p| {
            Ok(EnsembleEntry {
                path_id: p.id().to_string(),
                y0: p.y0(),
                samples: simulate_path(model, p, samples, seed)?,
            })
        })
        .collect::<Result<_>>()?;
    SimulationEnsemble::new(observed.horizon(), entries)
}
