//! Latent covariance `Sigma(X, theta)`: an AR(1) correlation with a
//! covariate-driven variance profile.
//!
//! Each variance function sees the covariates only through the linear index
//! `beta . X`, so covariance artifacts can be shared by paths with equal index.

use serde::{Deserialize, Serialize};

use crate::error::{GlimError, Result};
use crate::gaussian::CovMatrix;

const MAX_EXPONENT: f64 = 700.0;

/// Per-step latent variances `sigma_1^2..sigma_T^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceProfile {
    sigma2: Vec<f64>,
}

impl VarianceProfile {
    pub fn new(sigma2: Vec<f64>) -> Result<Self> {
        if sigma2.is_empty() {
            return Err(GlimError::InvalidArgument("variance profile is empty".into()));
        }
        if let Some(t) = sigma2.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(GlimError::Range(format!(
                "variance at t={} is {}, expected a positive finite value",
                t + 1,
                sigma2[t]
            )));
        }
        Ok(VarianceProfile { sigma2 })
    }

    pub fn values(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn len(&self) -> usize {
        self.sigma2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma2.is_empty()
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        VarianceProfile::new(self.sigma2.iter().map(|v| v * k).collect())
    }
}

fn exp_profile(horizon: usize, exponent: impl Fn(usize) -> f64) -> Result<VarianceProfile> {
    let mut out = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let e = exponent(t);
        if !e.is_finite() || e.abs() > MAX_EXPONENT {
            return Err(GlimError::Range(format!(
                "variance exponent {e} at t={t} exceeds +/-{MAX_EXPONENT}"
            )));
        }
        out.push(e.exp());
    }
    VarianceProfile::new(out)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A family `G(X, t)` of variance profiles indexed by `beta . X`.
pub trait VarianceFunction {
    fn name(&self) -> &'static str;
    fn profile(&self, index: f64, horizon: usize) -> Result<VarianceProfile>;
}

/// The registered variance functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum VarianceFn {
    /// `exp(beta.X (t-1))`.
    ExpLinear,
    /// `exp(c sigmoid(beta.X) (t-1))`, bounded by `exp(c (T-1))`.
    SigmoidScaled { c: f64 },
    /// `exp(a (t-1)^2 + b (t-1) + c_t)` with `a = softplus(beta.X)` and `b = -p a`.
    QuadraticSoftplus {
        p: f64,
        #[serde(default = "default_p_bounds")]
        p_bounds: (f64, f64),
        c_t: Vec<f64>,
        /// Position in `c_t` of the entry used at `t = 1`.
        #[serde(default)]
        c_offset: usize,
        /// Divide the profile by `sigma_1^2` so that `Var(Z_1) = 1`.
        #[serde(default)]
        renormalize: bool,
    },
}

pub fn default_p_bounds() -> (f64, f64) {
    (4.0, 5.0)
}

impl VarianceFn {
    pub const NAMES: [&'static str; 3] = ["exp-linear", "sigmoid-scaled", "quadratic-softplus"];

    pub fn validate(&self) -> Result<()> {
        match self {
            VarianceFn::ExpLinear => Ok(()),
            VarianceFn::SigmoidScaled { c } => {
                if c.is_finite() && *c > 0.0 {
                    Ok(())
                } else {
                    Err(GlimError::Config(format!("sigmoid-scaled needs c > 0, got {c}")))
                }
            }
            VarianceFn::QuadraticSoftplus { p, p_bounds, c_t, .. } => {
                let (lo, hi) = *p_bounds;
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(GlimError::Config(format!("invalid p bounds [{lo}, {hi}]")));
                }
                if !(lo..=hi).contains(p) {
                    return Err(GlimError::Config(format!("p = {p} is outside [{lo}, {hi}]")));
                }
                if c_t.iter().any(|c| !c.is_finite()) {
                    return Err(GlimError::Config("c_t entries must be finite".into()));
                }
                Ok(())
            }
        }
    }
}

impl VarianceFunction for VarianceFn {
    fn name(&self) -> &'static str {
        match self {
            VarianceFn::ExpLinear => "exp-linear",
            VarianceFn::SigmoidScaled { .. } => "sigmoid-scaled",
            VarianceFn::QuadraticSoftplus { .. } => "quadratic-softplus",
        }
    }

    fn profile(&self, index: f64, horizon: usize) -> Result<VarianceProfile> {
        self.validate()?;
        match self {
            VarianceFn::ExpLinear => exp_profile(horizon, |t| index * (t - 1) as f64),
            VarianceFn::SigmoidScaled { c } => {
                let s = sigmoid(index);
                exp_profile(horizon, |t| c * s * (t - 1) as f64)
            }
            VarianceFn::QuadraticSoftplus {
                p,
                c_t,
                c_offset,
                renormalize,
                ..
            } => {
                if !(c_t.len() == horizon || c_t.len() == horizon + 1) || c_offset + horizon > c_t.len() {
                    return Err(GlimError::Config(format!(
                        "c_t has {} entries; horizon {horizon} with offset {c_offset} needs {} or {} entries",
                        c_t.len(),
                        horizon,
                        horizon + 1
                    )));
                }
                let a = softplus(index);
                let b = -p * a;
                let profile = exp_profile(horizon, |t| {
                    let s = (t - 1) as f64;
                    a * s * s + b * s + c_t[c_offset + t - 1]
                })?;
                if *renormalize {
                    let first = profile.values()[0];
                    profile.scaled(1.0 / first)
                } else {
                    Ok(profile)
                }
            }
        }
    }
}

fn linear_index(beta: &[f64], x: &[f64]) -> Result<f64> {
    if beta.len() != x.len() {
        return Err(GlimError::InvalidArgument(format!(
            "beta has {} entries but X has {}",
            beta.len(),
            x.len()
        )));
    }
    Ok(beta.iter().zip(x).map(|(b, v)| b * v).sum())
}

pub fn variance_exp_linear(beta: &[f64], x: &[f64], horizon: usize) -> Result<VarianceProfile> {
    VarianceFn::ExpLinear.profile(linear_index(beta, x)?, horizon)
}

pub fn variance_sigmoid_scaled(beta: &[f64], x: &[f64], horizon: usize, c: f64) -> Result<VarianceProfile> {
    VarianceFn::SigmoidScaled { c }.profile(linear_index(beta, x)?, horizon)
}

pub fn variance_quadratic_softplus(
    beta: &[f64],
    x: &[f64],
    horizon: usize,
    p: f64,
    c_t: &[f64],
) -> Result<VarianceProfile> {
    VarianceFn::QuadraticSoftplus {
        p,
        p_bounds: default_p_bounds(),
        c_t: c_t.to_vec(),
        c_offset: 0,
        renormalize: false,
    }
    .profile(linear_index(beta, x)?, horizon)
}

/// Parameter vector `theta = (rho, beta, extras)` with its variance function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub rho: f64,
    pub beta: Vec<f64>,
    pub variance_fn: VarianceFn,
}

impl CovarianceSpec {
    pub fn new(rho: f64, beta: Vec<f64>, variance_fn: VarianceFn) -> Result<Self> {
        let spec = CovarianceSpec {
            rho,
            beta,
            variance_fn,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn exp_linear(rho: f64, beta: Vec<f64>) -> Result<Self> {
        CovarianceSpec::new(rho, beta, VarianceFn::ExpLinear)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho.is_finite() && self.rho.abs() < 1.0) {
            return Err(GlimError::InvalidArgument(format!(
                "rho must lie in (-1, 1), got {}",
                self.rho
            )));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(GlimError::InvalidArgument("beta entries must be finite".into()));
        }
        self.variance_fn.validate()
    }

    pub fn index(&self, x: &[f64]) -> Result<f64> {
        linear_index(&self.beta, x)
    }

    pub fn profile(&self, x: &[f64], horizon: usize) -> Result<VarianceProfile> {
        self.variance_fn.profile(self.index(x)?, horizon)
    }
}

/// `Sigma_(i,j) = sigma_i sigma_j rho^|i-j|`.
pub fn ar1_covariance(rho: f64, profile: &VarianceProfile) -> Result<CovMatrix> {
    let n = profile.len();
    let sd: Vec<f64> = profile.values().iter().map(|v| v.sqrt()).collect();
    let mut e = vec![0.0; n * n];
    for i in 0..n {
        e[i * n + i] = profile.values()[i];
        let mut r = 1.0;
        for j in (i + 1)..n {
            r *= rho;
            let v = sd[i] * sd[j] * r;
            e[i * n + j] = v;
            e[j * n + i] = v;
        }
    }
    CovMatrix::new(n, e).map_err(|err| match err {
        GlimError::Numerical(msg) => GlimError::Numerical(format!(
            "covariance with rho={rho} and variance profile {:?} failed: {msg}",
            profile.values()
        )),
        other => other,
    })
}

pub fn build_sigma(spec: &CovarianceSpec, x: &[f64], horizon: usize) -> Result<CovMatrix> {
    spec.validate()?;
    ar1_covariance(spec.rho, &spec.profile(x, horizon)?)
}

pub fn build_sigma_with(
    variance: &dyn VarianceFunction,
    rho: f64,
    index: f64,
    horizon: usize,
) -> Result<CovMatrix> {
    if !(rho.is_finite() && rho.abs() < 1.0) {
        return Err(GlimError::InvalidArgument(format!("rho must lie in (-1, 1), got {rho}")));
    }
    ar1_covariance(rho, &variance.profile(index, horizon)?)
}
