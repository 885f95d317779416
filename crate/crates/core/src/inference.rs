//! Fitting `theta = (rho, beta, extras)` to a dataset: maximum likelihood by
//! restarted Nelder-Mead and posterior sampling by adaptive random-walk
//! Metropolis, both on an unconstrained reparameterization.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{build_sigma, sigmoid, CovarianceSpec, VarianceFn};
use crate::error::{GlimError, Result};
use crate::gaussian::Cholesky;
use crate::glim::{first_exit, terminal_log_prob, ConditioningCache, Exit, GlimPathModel};
use crate::path::{probit, PathDataset, DEFAULT_CLAMP};
use crate::seed::indexed_rng;

/// Fewest paths a fit accepts.
pub const MIN_FIT_PATHS: usize = 10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Normal prior on one unconstrained coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub loc: f64,
    pub scale: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Prior { loc: 0.0, scale: 1.0 }
    }
}

impl Prior {
    fn log_density(&self, v: f64) -> f64 {
        let r = (v - self.loc) / self.scale;
        -0.5 * r * r - self.scale.ln() - 0.5 * LN_2PI
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    Mle,
    Mcmc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            restarts: 8,
            max_iter: 2000,
            tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    /// Initial random-walk step in unconstrained units.
    pub proposal_scale: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chains: 4,
            warmup: 1000,
            draws: 1000,
            proposal_scale: 0.1,
        }
    }
}

/// How the likelihood treats interior values outside `[clamp, 1 - clamp]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Saturation {
    /// Each path counts until its first value outside the band; that step
    /// adds the probability of leaving on that side and the rest is dropped.
    #[default]
    Censor,
    /// Clamp into the band and use the exact density throughout.
    Clamp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub mode: FitMode,
    pub variance_fn: VarianceFn,
    /// When false, `rho` is held at 0.
    pub rho_free: bool,
    pub mle: MleConfig,
    pub mcmc: McmcConfig,
    /// One prior per free parameter, or a single prior shared by all; empty
    /// means `Normal(0, 1)` throughout.
    pub priors: Vec<Prior>,
    /// Sample the prior alone, ignoring the data.
    pub prior_only: bool,
    pub seed: u64,
    pub clamp: f64,
    pub saturation: Saturation,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            mode: FitMode::Mle,
            variance_fn: VarianceFn::ExpLinear,
            rho_free: true,
            mle: MleConfig::default(),
            mcmc: McmcConfig::default(),
            priors: Vec::new(),
            prior_only: false,
            seed: 0,
            clamp: DEFAULT_CLAMP,
            saturation: Saturation::Censor,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("fit.restarts", self.mle.restarts),
            ("fit.max_iter", self.mle.max_iter),
            ("fit.chains", self.mcmc.chains),
            ("fit.warmup", self.mcmc.warmup),
            ("fit.draws", self.mcmc.draws),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(GlimError::Config(format!("{key} must be positive")));
            }
        }
        if !(self.mle.tol > 0.0) {
            return Err(GlimError::Config(format!("fit.tol must be positive, got {}", self.mle.tol)));
        }
        if !(self.mcmc.proposal_scale > 0.0) {
            return Err(GlimError::Config("fit.proposal_scale must be positive".into()));
        }
        if self.mcmc.draws < 4 {
            return Err(GlimError::Config("fit.draws must be at least 4 for split R-hat".into()));
        }
        if self.priors.iter().any(|p| !(p.scale > 0.0 && p.loc.is_finite())) {
            return Err(GlimError::Config("prior scales must be positive".into()));
        }
        if !(self.clamp > 0.0 && self.clamp < 0.5) {
            return Err(GlimError::Config(format!("clamp must lie in (0, 0.5), got {}", self.clamp)));
        }
        self.variance_fn.validate()
    }
}

/// Map between the free parameters and a `CovarianceSpec`.
///
/// Unconstrained coordinates, in order: `atanh(rho)` if free, each `beta`,
/// then `logit` of `p` rescaled to its bounds for quadratic-softplus.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    template: VarianceFn,
    rho_free: bool,
    n_beta: usize,
}

impl ParamLayout {
    pub fn new(template: VarianceFn, n_beta: usize, rho_free: bool) -> Self {
        ParamLayout {
            template,
            rho_free,
            n_beta,
        }
    }

    fn p_bounds(&self) -> Option<(f64, f64)> {
        match &self.template {
            VarianceFn::QuadraticSoftplus { p_bounds, .. } => Some(*p_bounds),
            _ => None,
        }
    }

    pub fn dim(&self) -> usize {
        usize::from(self.rho_free) + self.n_beta + usize::from(self.p_bounds().is_some())
    }

    /// Names of the free parameters in constrained form.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim());
        if self.rho_free {
            out.push("rho".to_string());
        }
        out.extend((0..self.n_beta).map(|i| format!("beta[{i}]")));
        if self.p_bounds().is_some() {
            out.push("p".to_string());
        }
        out
    }

    /// `None` when the coordinates leave the parameter space numerically.
    pub fn to_spec(&self, v: &[f64]) -> Option<CovarianceSpec> {
        let mut k = 0;
        let rho = if self.rho_free {
            k = 1;
            v[0].tanh()
        } else {
            0.0
        };
        if !(rho.abs() < 1.0) {
            return None;
        }
        let beta = v[k..k + self.n_beta].to_vec();
        let mut variance_fn = self.template.clone();
        if let VarianceFn::QuadraticSoftplus { p, p_bounds, .. } = &mut variance_fn {
            let (lo, hi) = *p_bounds;
            *p = (lo + (hi - lo) * sigmoid(v[k + self.n_beta])).clamp(lo, hi);
        }
        let spec = CovarianceSpec {
            rho,
            beta,
            variance_fn,
        };
        spec.validate().ok().map(|_| spec)
    }

    pub fn to_unconstrained(&self, spec: &CovarianceSpec) -> Result<Vec<f64>> {
        if spec.beta.len() != self.n_beta {
            return Err(GlimError::InvalidArgument(format!(
                "expected {} beta entries, got {}",
                self.n_beta,
                spec.beta.len()
            )));
        }
        let mut out = Vec::with_capacity(self.dim());
        if self.rho_free {
            out.push(spec.rho.atanh());
        }
        out.extend_from_slice(&spec.beta);
        if let (Some((lo, hi)), VarianceFn::QuadraticSoftplus { p, .. }) = (self.p_bounds(), &spec.variance_fn) {
            let q = ((p - lo) / (hi - lo)).clamp(1e-12, 1.0 - 1e-12);
            out.push((q / (1.0 - q)).ln());
        }
        Ok(out)
    }

    /// Constrained values of the free parameters.
    pub fn values(&self, spec: &CovarianceSpec) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        if self.rho_free {
            out.push(spec.rho);
        }
        out.extend_from_slice(&spec.beta);
        if let VarianceFn::QuadraticSoftplus { p, .. } = &spec.variance_fn {
            out.push(*p);
        }
        out
    }
}

#[derive(Clone, Debug)]
struct PreparedPath {
    u0: f64,
    /// Probits up to the exit, or the whole interior.
    u: Vec<f64>,
    exit: Option<Exit>,
    last: f64,
    outcome: bool,
}

#[derive(Clone, Debug)]
struct Group {
    x: Vec<f64>,
    paths: Vec<PreparedPath>,
}

/// A resolved dataset with probits precomputed and paths grouped by
/// covariate vector, so each group shares one set of covariance artifacts.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    horizon: usize,
    arity: usize,
    eps: f64,
    n_paths: usize,
    groups: Vec<Group>,
}

impl PreparedDataset {
    pub fn new(data: &PathDataset, eps: f64, saturation: Saturation) -> Result<Self> {
        let horizon = data.horizon();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut groups: Vec<Group> = Vec::new();
        for path in data.paths() {
            let outcome = path.terminal().ok_or_else(|| {
                GlimError::Input(format!("path '{}' has no resolved endpoint", path.id()))
            })?;
            let y = path.values();
            let exit = match saturation {
                Saturation::Censor => first_exit(&y[1..horizon], eps),
                Saturation::Clamp => None,
            };
            let observed = exit.map_or(horizon, |(k, _)| k + 1);
            let prepared = PreparedPath {
                u0: probit(y[0], eps),
                u: y[1..observed].iter().map(|&v| probit(v, eps)).collect(),
                exit: exit.map(|(_, side)| side),
                last: y[horizon - 1],
                outcome,
            };
            let key: Vec<u64> = path.covariates().iter().map(|v| v.to_bits()).collect();
            let g = *index.entry(key).or_insert_with(|| {
                groups.push(Group {
                    x: path.covariates().to_vec(),
                    paths: Vec::new(),
                });
                groups.len() - 1
            });
            groups[g].paths.push(prepared);
        }
        Ok(PreparedDataset {
            horizon,
            arity: data.covariate_names().len(),
            eps,
            n_paths: data.len(),
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.n_paths
    }

    pub fn is_empty(&self) -> bool {
        self.n_paths == 0
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Total log-likelihood; `-inf` when `theta` gives a numerically invalid model.
    pub fn log_likelihood(&self, spec: &CovarianceSpec) -> Result<f64> {
        if spec.beta.len() != self.arity {
            return Err(GlimError::InvalidArgument(format!(
                "theta has {} beta entries but the data has {} covariates",
                spec.beta.len(),
                self.arity
            )));
        }
        let mut total = 0.0;
        for group in &self.groups {
            match self.group_log_likelihood(spec, group) {
                Ok(v) => total += v,
                Err(e) if e.is_numerical() => return Ok(f64::NEG_INFINITY),
                Err(e) => return Err(e),
            }
        }
        Ok(total)
    }

    fn group_log_likelihood(&self, spec: &CovarianceSpec, group: &Group) -> Result<f64> {
        let cache = Arc::new(ConditioningCache::new(build_sigma(spec, &group.x, self.horizon)?)?);
        let root = cache.sqrt_sum(0);
        let mut total = 0.0;
        for p in &group.paths {
            let model = GlimPathModel::new(cache.clone(), p.u0 * root)?.with_clamp(self.eps);
            total += match p.exit {
                Some(side) => model.stopped_log_density(&p.u, Some(side))?,
                None => model.interior_log_density(&p.u)? + terminal_log_prob(p.last, p.outcome, self.eps),
            };
        }
        Ok(total)
    }
}

/// Sum of per-path log-densities under `theta`; `-inf` marks a rejected point.
pub fn dataset_log_likelihood(spec: &CovarianceSpec, data: &PathDataset) -> Result<f64> {
    PreparedDataset::new(data, DEFAULT_CLAMP, Saturation::Censor)?.log_likelihood(spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    Converged,
    /// Usable, but a convergence check was not met.
    Warning,
    NotConverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub initial_log_likelihood: f64,
    pub final_log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub mode: FitMode,
    pub status: FitStatus,
    pub n_paths: usize,
    pub parameters: Vec<String>,
    pub log_likelihood: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub restarts: Vec<RestartRecord>,
    /// Post-warmup acceptance rate per chain.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub acceptance: Vec<f64>,
    /// Split R-hat per free parameter, in `parameters` order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rhat: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub point: CovarianceSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draws: Option<Vec<CovarianceSpec>>,
    pub diagnostics: Diagnostics,
}

impl FitResult {
    pub fn is_converged(&self) -> bool {
        self.diagnostics.status != FitStatus::NotConverged
    }
}

struct Target<'a> {
    data: &'a PreparedDataset,
    layout: ParamLayout,
    priors: Vec<Prior>,
    prior_only: bool,
}

impl<'a> Target<'a> {
    fn new(data: &'a PreparedDataset, config: &FitConfig) -> Result<Self> {
        config.validate()?;
        if data.len() < MIN_FIT_PATHS {
            return Err(GlimError::InvalidArgument(format!(
                "fitting needs at least {MIN_FIT_PATHS} paths, got {}",
                data.len()
            )));
        }
        let layout = ParamLayout::new(config.variance_fn.clone(), data.arity(), config.rho_free);
        let priors = if config.priors.is_empty() {
            vec![Prior::default(); layout.dim()]
        } else if config.priors.len() == layout.dim() {
            config.priors.clone()
        } else if config.priors.len() == 1 {
            vec![config.priors[0]; layout.dim()]
        } else {
            return Err(GlimError::Config(format!(
                "{} priors given for {} free parameters",
                config.priors.len(),
                layout.dim()
            )));
        };
        Ok(Target {
            data,
            layout,
            priors,
            prior_only: config.prior_only,
        })
    }

    fn log_likelihood(&self, v: &[f64]) -> f64 {
        match self.layout.to_spec(v) {
            Some(spec) => self.data.log_likelihood(&spec).unwrap_or(f64::NEG_INFINITY),
            None => f64::NEG_INFINITY,
        }
    }

    fn log_prior(&self, v: &[f64]) -> f64 {
        self.priors.iter().zip(v).map(|(p, x)| p.log_density(*x)).sum()
    }

    fn log_posterior(&self, v: &[f64]) -> f64 {
        if self.prior_only {
            if self.layout.to_spec(v).is_some() {
                self.log_prior(v)
            } else {
                f64::NEG_INFINITY
            }
        } else {
            let ll = self.log_likelihood(v);
            if ll == f64::NEG_INFINITY {
                ll
            } else {
                ll + self.log_prior(v)
            }
        }
    }

    fn draw_prior<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.priors
            .iter()
            .map(|p| p.loc + p.scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Result of a local minimization.
#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Nelder-Mead simplex minimization. NaN objective values count as `+inf`.
///
/// Stops when the spread of objective values is below `tol * (1 + |f_best|)`
/// and every vertex lies within `1e-6` of the best one, coordinatewise.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], step: f64, max_iter: usize, tol: f64) -> Minimum {
    let n = x0.len();
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    if n == 0 {
        return Minimum {
            x: Vec::new(),
            f: eval(x0),
            iterations: 0,
            converged: true,
        };
    }
    let mut pts = vec![x0.to_vec()];
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p)).collect();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if vals[0] == f64::INFINITY {
            break;
        }
        let spread = vals[n] - vals[0];
        let width = pts[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread <= tol * (1.0 + vals[0].abs()) && width <= 1e-6 {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for p in &pts[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&pts[n])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(1.0);
        let fr = eval(&xr);
        if fr < vals[0] {
            let xe = along(2.0);
            let fe = eval(&xe);
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
            continue;
        }
        if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
            continue;
        }
        let (xc, fc, accept) = if fr < vals[n] {
            let xc = along(0.5);
            let fc = eval(&xc);
            (xc, fc, fc <= fr)
        } else {
            let xc = along(-0.5);
            let fc = eval(&xc);
            (xc, fc, fc < vals[n])
        };
        if accept {
            pts[n] = xc;
            vals[n] = fc;
            continue;
        }
        for i in 1..=n {
            let p: Vec<f64> = pts[0].iter().zip(&pts[i]).map(|(b, v)| b + 0.5 * (v - b)).collect();
            vals[i] = eval(&p);
            pts[i] = p;
        }
    }
    Minimum {
        x: pts.swap_remove(0),
        f: vals[0],
        iterations,
        converged,
    }
}

/// Maximum likelihood over restarts drawn from the prior.
pub fn fit_mle(data: &PathDataset, config: &FitConfig) -> Result<FitResult> {
    let prepared = PreparedDataset::new(data, config.clamp, config.saturation)?;
    fit_mle_prepared(&prepared, config)
}

pub fn fit_mle_prepared(data: &PreparedDataset, config: &FitConfig) -> Result<FitResult> {
    let target = Target::new(data, config)?;
    let runs: Vec<(Minimum, RestartRecord)> = (0..config.mle.restarts)
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed_rng(config.seed, "mle-restart", i);
            let x0 = target.draw_prior(&mut rng);
            let initial = target.log_likelihood(&x0);
            let m = nelder_mead(|v| -target.log_likelihood(v), &x0, 0.5, config.mle.max_iter, config.mle.tol);
            let record = RestartRecord {
                initial_log_likelihood: initial,
                final_log_likelihood: -m.f,
                iterations: m.iterations,
                converged: m.converged,
            };
            (m, record)
        })
        .collect();
    let mut best: Option<usize> = None;
    for (i, (m, _)) in runs.iter().enumerate() {
        if m.f.is_finite() && best.is_none_or(|b| m.f < runs[b].0.f) {
            best = Some(i);
        }
    }
    let best = best.ok_or_else(|| {
        GlimError::Fit("every restart stayed where the covariance is not positive definite".into())
    })?;
    let (m, record) = &runs[best];
    let point = target
        .layout
        .to_spec(&m.x)
        .ok_or_else(|| GlimError::Fit("optimum left the parameter space".into()))?;
    let status = if record.converged {
        FitStatus::Converged
    } else {
        FitStatus::Warning
    };
    Ok(FitResult {
        point,
        draws: None,
        diagnostics: Diagnostics {
            mode: FitMode::Mle,
            status,
            n_paths: data.len(),
            parameters: target.layout.names(),
            log_likelihood: -m.f,
            restarts: runs.into_iter().map(|(_, r)| r).collect(),
            acceptance: Vec::new(),
            rhat: Vec::new(),
        },
    })
}

/// Split R-hat of one parameter; each chain is halved into two.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let len = chains.iter().map(Vec::len).min().unwrap_or(0);
    let n = len / 2;
    if chains.is_empty() || n < 2 {
        return f64::NAN;
    }
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..n], &c[n..2 * n]])
        .collect();
    let m = halves.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / nf).collect();
    let within = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    let grand = means.iter().sum::<f64>() / m;
    let between = nf * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0);
    if within == 0.0 {
        return if between == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let pooled = (nf - 1.0) / nf * within + between / nf;
    (pooled / within).sqrt()
}

/// Target acceptance rate of the scale adaptation.
const TARGET_ACCEPT: f64 = 0.234;

struct Chain {
    draws: Vec<Vec<f64>>,
    acceptance: f64,
}

fn empirical_factor(points: &[Vec<f64>], d: usize) -> Option<Cholesky> {
    let n = points.len();
    if n <= d + 1 {
        return None;
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (p[i] - mean[i]) * (p[j] - mean[j]) / (n - 1) as f64;
            }
        }
    }
    for i in 0..d {
        cov[i * d + i] += 1e-8;
    }
    Cholesky::decompose(d, &cov).ok()
}

/// Spread of chain starting points around the posterior mode.
const START_JITTER: f64 = 0.1;

/// Highest-posterior point over restarts drawn from the prior.
fn posterior_mode(target: &Target<'_>, config: &FitConfig) -> Option<Vec<f64>> {
    (0..config.mle.restarts)
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed_rng(config.seed, "mcmc-init", i);
            let x0 = target.draw_prior(&mut rng);
            nelder_mead(|v| -target.log_posterior(v), &x0, 0.5, config.mle.max_iter, config.mle.tol)
        })
        .filter(|m| m.f.is_finite())
        .min_by(|a, b| a.f.total_cmp(&b.f))
        .map(|m| m.x)
}

fn run_chain(target: &Target<'_>, config: &McmcConfig, index: usize, seed: u64, mode: Option<&[f64]>) -> Result<Chain> {
    let d = target.layout.dim();
    let mut rng = indexed_rng(seed, "mcmc-chain", index);
    let mut x = Vec::new();
    let mut lp = f64::NEG_INFINITY;
    for _ in 0..100 {
        x = match mode {
            Some(m) => m
                .iter()
                .map(|v| v + START_JITTER * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            None => target.draw_prior(&mut rng),
        };
        lp = target.log_posterior(&x);
        if lp.is_finite() {
            break;
        }
    }
    if !lp.is_finite() {
        return Err(GlimError::Fit(format!("chain {index} found no valid starting point")));
    }

    let warmup = config.warmup;
    let mut factor: Option<Cholesky> = None;
    let mut log_scale = config.proposal_scale.ln();
    let mut history: Vec<Vec<f64>> = Vec::with_capacity(warmup);
    let mut draws = Vec::with_capacity(config.draws);
    let mut accepted = 0usize;
    for it in 0..warmup + config.draws {
        // Re-estimate the proposal shape twice during warmup from the recent half.
        if it == warmup / 2 || it == 3 * warmup / 4 {
            if let Some(f) = empirical_factor(&history[it / 2..], d) {
                factor = Some(f);
                if it == warmup / 2 {
                    log_scale = (2.38 / (d as f64).sqrt()).ln();
                }
            }
        }
        let noise: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let step = match &factor {
            Some(f) => f.mul_lower(&noise),
            None => noise,
        };
        let scale = log_scale.exp();
        let proposal: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + scale * s).collect();
        let lp_new = target.log_posterior(&proposal);
        let log_ratio = lp_new - lp;
        let accept_prob = if log_ratio >= 0.0 { 1.0 } else { log_ratio.exp() };
        let u: f64 = rng.random();
        let accept = lp_new.is_finite() && u < accept_prob;
        if accept {
            x = proposal;
            lp = lp_new;
        }
        if it < warmup {
            log_scale += (accept_prob - TARGET_ACCEPT) / ((it + 1) as f64).powf(0.6);
            history.push(x.clone());
        } else {
            accepted += usize::from(accept);
            draws.push(x.clone());
        }
    }
    Ok(Chain {
        acceptance: accepted as f64 / config.draws as f64,
        draws,
    })
}

/// Posterior sampling; the point estimate is the posterior mean of each
/// constrained parameter. Chains start around the posterior mode found with
/// the MLE restart settings.
pub fn fit_posterior(data: &PathDataset, config: &FitConfig) -> Result<FitResult> {
    let prepared = PreparedDataset::new(data, config.clamp, config.saturation)?;
    fit_posterior_prepared(&prepared, config)
}

pub fn fit_posterior_prepared(data: &PreparedDataset, config: &FitConfig) -> Result<FitResult> {
    let target = Target::new(data, config)?;
    // Chains start near the mode so that none settles in a minor local mode;
    // a pure prior run starts from prior draws.
    let mode = if config.prior_only { None } else { posterior_mode(&target, config) };
    let chains: Vec<Chain> = (0..config.mcmc.chains)
        .into_par_iter()
        .map(|c| run_chain(&target, &config.mcmc, c, config.seed, mode.as_deref()))
        .collect::<Result<_>>()?;

    let d = target.layout.dim();
    let rhat: Vec<f64> = (0..d)
        .map(|k| {
            let per_chain: Vec<Vec<f64>> = chains
                .iter()
                .map(|c| c.draws.iter().map(|v| v[k]).collect())
                .collect();
            split_rhat(&per_chain)
        })
        .collect();
    let worst = rhat.iter().copied().fold(1.0f64, |a, b| if b.is_nan() { a } else { a.max(b) });
    let status = if worst >= 1.2 {
        FitStatus::NotConverged
    } else if worst >= 1.05 {
        FitStatus::Warning
    } else {
        FitStatus::Converged
    };

    let specs: Vec<CovarianceSpec> = chains
        .iter()
        .flat_map(|c| c.draws.iter())
        .map(|v| target.layout.to_spec(v).expect("accepted draws are valid"))
        .collect();
    let mut mean = vec![0.0; d];
    for s in &specs {
        for (m, v) in mean.iter_mut().zip(target.layout.values(s)) {
            *m += v / specs.len() as f64;
        }
    }
    let point = constrained_spec(&target.layout, &mean)?;
    let log_likelihood = data.log_likelihood(&point)?;
    Ok(FitResult {
        point,
        draws: Some(specs),
        diagnostics: Diagnostics {
            mode: FitMode::Mcmc,
            status,
            n_paths: data.len(),
            parameters: target.layout.names(),
            log_likelihood,
            restarts: Vec::new(),
            acceptance: chains.iter().map(|c| c.acceptance).collect(),
            rhat,
        },
    })
}

fn constrained_spec(layout: &ParamLayout, values: &[f64]) -> Result<CovarianceSpec> {
    let mut k = 0;
    let rho = if layout.rho_free {
        k = 1;
        values[0]
    } else {
        0.0
    };
    let beta = values[k..k + layout.n_beta].to_vec();
    let mut variance_fn = layout.template.clone();
    if let VarianceFn::QuadraticSoftplus { p, .. } = &mut variance_fn {
        *p = values[k + layout.n_beta];
    }
    CovarianceSpec::new(rho, beta, variance_fn)
}

/// Runs the fit selected by `config.mode`.
pub fn fit(data: &PathDataset, config: &FitConfig) -> Result<FitResult> {
    match config.mode {
        FitMode::Mle => fit_mle(data, config),
        FitMode::Mcmc => fit_posterior(data, config),
    }
}
