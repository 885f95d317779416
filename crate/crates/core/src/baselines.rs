//! Reference path models: the martingale model of forecast evolution
//! (Gaussian increments in probability space) and per-step linear regression.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GlimError, Result};
use crate::gaussian::Cholesky;
use crate::path::{clamp_probability, PathDataset};

/// Added to the increment covariance diagonal before factoring.
pub const MMFE_JITTER: f64 = 1e-10;

fn bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    if u < p {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MmfeRecord {
    horizon: usize,
    increment_cov: Vec<Vec<f64>>,
}

/// Covariance of the `T` increments `y_t - y_{t-1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MmfeRecord", into = "MmfeRecord")]
pub struct MmfeModel {
    horizon: usize,
    cov: Vec<f64>,
    factor: Cholesky,
}

impl TryFrom<MmfeRecord> for MmfeModel {
    type Error = GlimError;

    fn try_from(r: MmfeRecord) -> Result<Self> {
        if r.increment_cov.len() != r.horizon || r.increment_cov.iter().any(|row| row.len() != r.horizon) {
            return Err(GlimError::Input(format!(
                "increment covariance must be {0}x{0}",
                r.horizon
            )));
        }
        MmfeModel::from_covariance(r.horizon, r.increment_cov.concat())
    }
}

impl From<MmfeModel> for MmfeRecord {
    fn from(m: MmfeModel) -> Self {
        MmfeRecord {
            horizon: m.horizon,
            increment_cov: m.increment_cov(),
        }
    }
}

impl MmfeModel {
    /// Model from a row-major increment covariance, jittered before factoring.
    pub fn from_covariance(horizon: usize, cov: Vec<f64>) -> Result<Self> {
        if horizon == 0 || cov.len() != horizon * horizon {
            return Err(GlimError::InvalidArgument(format!(
                "expected {} covariance entries, got {}",
                horizon * horizon,
                cov.len()
            )));
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(GlimError::InvalidArgument("covariance entries must be finite".into()));
        }
        let mut jittered = cov.clone();
        for i in 0..horizon {
            jittered[i * horizon + i] += MMFE_JITTER;
        }
        let factor = Cholesky::decompose(horizon, &jittered)?;
        Ok(MmfeModel { horizon, cov, factor })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Fitted covariance, without jitter.
    pub fn increment_cov(&self) -> Vec<Vec<f64>> {
        self.cov.chunks(self.horizon).map(<[f64]>::to_vec).collect()
    }

    pub fn cov_entry(&self, i: usize, j: usize) -> f64 {
        self.cov[i * self.horizon + j]
    }
}

/// Empirical covariance (denominator `n - 1`) of the per-path increment vectors.
pub fn mmfe_fit(data: &PathDataset) -> Result<MmfeModel> {
    let horizon = data.horizon();
    let n = data.len();
    if n < horizon + 1 {
        return Err(GlimError::Fit(format!(
            "MMFE needs at least {} paths for horizon {horizon}, got {n}",
            horizon + 1
        )));
    }
    let increments: Vec<Vec<f64>> = data
        .paths()
        .iter()
        .map(|p| p.values().windows(2).map(|w| w[1] - w[0]).collect())
        .collect();
    let mut mean = vec![0.0; horizon];
    for d in &increments {
        for (m, v) in mean.iter_mut().zip(d) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; horizon * horizon];
    for d in &increments {
        for i in 0..horizon {
            let di = d[i] - mean[i];
            for j in i..horizon {
                cov[i * horizon + j] += di * (d[j] - mean[j]);
            }
        }
    }
    for i in 0..horizon {
        for j in i..horizon {
            let v = cov[i * horizon + j] / (n - 1) as f64;
            cov[i * horizon + j] = v;
            cov[j * horizon + i] = v;
        }
    }
    MmfeModel::from_covariance(horizon, cov)
}

/// Cumulates a Gaussian increment draw onto `y0`, clamping each interior
/// value into `[eps, 1 - eps]`; the endpoint is `Bernoulli(y_{T-1})`.
pub fn mmfe_sample<R: Rng + ?Sized>(model: &MmfeModel, y0: f64, eps: f64, rng: &mut R) -> Vec<f64> {
    let horizon = model.horizon;
    let noise: Vec<f64> = (0..horizon).map(|_| rng.sample(StandardNormal)).collect();
    let steps = model.factor.mul_lower(&noise);
    let mut y = Vec::with_capacity(horizon + 1);
    y.push(y0);
    let mut level = y0;
    for step in &steps[..horizon - 1] {
        level += step;
        y.push(clamp_probability(level, eps));
    }
    let last = y[horizon - 1];
    y.push(bernoulli(last, rng));
    y
}

/// Per-step least-squares forecasts `y_t ~ (1, X, y_0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrModel {
    pub horizon: usize,
    pub columns: Vec<String>,
    /// `coefficients[t - 1]` predicts `y_t`, in `columns` order.
    pub coefficients: Vec<Vec<f64>>,
    pub residual_sd: Vec<f64>,
}

impl LrModel {
    fn design_row(&self, y0: f64, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() + 2 != self.columns.len() {
            return Err(GlimError::InvalidArgument(format!(
                "model expects {} covariates, got {}",
                self.columns.len() - 2,
                x.len()
            )));
        }
        let mut row = Vec::with_capacity(x.len() + 2);
        row.push(1.0);
        row.extend_from_slice(x);
        row.push(y0);
        Ok(row)
    }

    /// Predicted `y_1..y_{T-1}`.
    pub fn predict(&self, y0: f64, x: &[f64]) -> Result<Vec<f64>> {
        let row = self.design_row(y0, x)?;
        Ok(self
            .coefficients
            .iter()
            .map(|c| c.iter().zip(&row).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Relative residual norm below which a design column counts as collinear.
const RANK_TOLERANCE: f64 = 1e-10;

/// Thin QR of the column-major design by modified Gram-Schmidt with one
/// reorthogonalization pass.
struct Qr {
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
}

fn thin_qr(columns: &[Vec<f64>], names: &[String]) -> Result<Qr> {
    let p = columns.len();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut r = vec![vec![0.0; p]; p];
    let mut dependent = Vec::new();
    for (j, col) in columns.iter().enumerate() {
        let mut v = col.clone();
        let original = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for _ in 0..2 {
            for (k, qk) in q.iter().enumerate() {
                let dot: f64 = qk.iter().zip(&v).map(|(a, b)| a * b).sum();
                r[k][j] += dot;
                for (vi, qi) in v.iter_mut().zip(qk) {
                    *vi -= dot * qi;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm <= RANK_TOLERANCE * original.max(1.0) {
            dependent.push(names[j].clone());
            // Keep shapes consistent so remaining columns are still checked.
            q.push(vec![0.0; v.len()]);
            continue;
        }
        r[j][j] = norm;
        q.push(v.iter().map(|a| a / norm).collect());
    }
    if !dependent.is_empty() {
        return Err(GlimError::Fit(format!(
            "design matrix is rank deficient: {} collinear with earlier columns of [{}]",
            dependent.join(", "),
            names.join(", ")
        )));
    }
    Ok(Qr { q, r })
}

pub fn lr_fit(data: &PathDataset) -> Result<LrModel> {
    let horizon = data.horizon();
    let arity = data.covariate_names().len();
    let n = data.len();
    let p = arity + 2;
    if n < p {
        return Err(GlimError::Fit(format!("linear regression needs at least {p} paths, got {n}")));
    }
    let mut names = vec!["intercept".to_string()];
    names.extend(data.covariate_names().iter().cloned());
    names.push("y0".to_string());

    let mut columns = vec![vec![1.0; n]];
    for k in 0..arity {
        columns.push(data.paths().iter().map(|path| path.covariates()[k]).collect());
    }
    columns.push(data.paths().iter().map(|path| path.y0()).collect());
    let qr = thin_qr(&columns, &names)?;

    let dof = n.saturating_sub(p).max(1) as f64;
    let mut coefficients = Vec::with_capacity(horizon.saturating_sub(1));
    let mut residual_sd = Vec::with_capacity(horizon.saturating_sub(1));
    for t in 1..horizon {
        let target: Vec<f64> = data.paths().iter().map(|path| path.values()[t]).collect();
        let qty: Vec<f64> = qr
            .q
            .iter()
            .map(|qk| qk.iter().zip(&target).map(|(a, b)| a * b).sum())
            .collect();
        let mut coef = vec![0.0; p];
        for j in (0..p).rev() {
            let tail: f64 = ((j + 1)..p).map(|k| qr.r[j][k] * coef[k]).sum();
            coef[j] = (qty[j] - tail) / qr.r[j][j];
        }
        let rss: f64 = (0..n)
            .map(|i| {
                let fit: f64 = (0..p).map(|k| columns[k][i] * coef[k]).sum();
                (target[i] - fit).powi(2)
            })
            .sum();
        coefficients.push(coef);
        residual_sd.push((rss / dof).sqrt());
    }
    Ok(LrModel {
        horizon,
        columns: names,
        coefficients,
        residual_sd,
    })
}

/// Prediction plus independent `Normal(0, residual_sd)` noise per step,
/// clamped into `[eps, 1 - eps]`; the endpoint is `Bernoulli(y_{T-1})`.
pub fn lr_sample<R: Rng + ?Sized>(model: &LrModel, y0: f64, x: &[f64], eps: f64, rng: &mut R) -> Result<Vec<f64>> {
    let mean = model.predict(y0, x)?;
    let mut y = Vec::with_capacity(model.horizon + 1);
    y.push(y0);
    for (m, sd) in mean.iter().zip(&model.residual_sd) {
        let noise: f64 = rng.sample(StandardNormal);
        y.push(clamp_probability(m + sd * noise, eps));
    }
    let last = y[model.horizon - 1];
    y.push(bernoulli(last, rng));
    Ok(y)
}
