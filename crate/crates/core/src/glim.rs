//! The Gaussian latent information martingale.
//!
//! Latent increments `Z ~ N(0, Sigma)` drive the forecast
//! `Y_t = P(gamma + sum_i Z_i >= 0 | Z_1..Z_t)`. Given `Sigma`, a path's
//! interior values identify the latents one step at a time, which gives an
//! exact recursive log-density in probit coordinates.

use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;

use crate::error::{GlimError, Result};
use crate::gaussian::{
    kahan_sum, log_std_cdf, regress_trailing, sample_with_factor, std_cdf, std_quantile, CovMatrix,
};
use crate::path::{clamp_probability, probit, ProbabilityPath, DEFAULT_CLAMP};

/// `1 + a^t_(t)` closer to zero than this makes the latent map singular.
const DEGENERATE_LEAD: f64 = 1e-12;

/// Information increments `z_1..z_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(GlimError::InvalidArgument("latent values must be finite".into()));
        }
        Ok(LatentVector(z))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for LatentVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Conditioning of `N(0, Sigma)` on its first `t` coordinates.
#[derive(Clone, Debug)]
pub struct StepConditioning {
    pub t: usize,
    /// `Sigma^t`, the covariance of `Z_{t+1..T}` given `Z_{1..t}`.
    pub cov: CovMatrix,
    /// `a^t = 1' Sigma21 inv(Sigma11)`, length `t`.
    pub a: Vec<f64>,
    /// Sum of all entries of `Sigma^t`.
    pub sum: f64,
}

#[derive(Clone, Debug)]
struct Step {
    a: Vec<f64>,
    sqrt_sum: f64,
    /// First row of `Sigma21 inv(Sigma11)`: `mu^t_(1) = lead_gain . z`.
    lead_gain: Vec<f64>,
    /// `Sigma^t_(1,1)`.
    lead_var: f64,
}

/// Path-independent artifacts of one `Sigma`, computed once and shared.
#[derive(Clone, Debug)]
pub struct ConditioningCache {
    sigma: CovMatrix,
    sqrt_total: f64,
    /// Index `t - 1` holds the conditioning on the first `t` latents, `t = 1..T-1`.
    steps: Vec<Step>,
}

impl ConditioningCache {
    pub fn new(sigma: CovMatrix) -> Result<Self> {
        let horizon = sigma.dim();
        let total = sigma.total_sum();
        if !(total > 0.0) {
            return Err(GlimError::Numerical(format!(
                "sum of covariance entries is {total}, expected a positive value"
            )));
        }
        let mut steps = Vec::with_capacity(horizon.saturating_sub(1));
        for t in 1..horizon {
            let reg = regress_trailing(&sigma, t);
            let rest = horizon - t;
            let a = (0..t)
                .map(|c| kahan_sum((0..rest).map(|r| reg.gain[r * t + c])))
                .collect();
            let sum = kahan_sum(reg.cov.iter().copied());
            if !(sum > 0.0) {
                return Err(GlimError::Numerical(format!(
                    "conditional covariance at t={t} sums to {sum}, expected a positive value"
                )));
            }
            steps.push(Step {
                a,
                sqrt_sum: sum.sqrt(),
                lead_gain: reg.gain[..t].to_vec(),
                lead_var: reg.cov[0],
            });
        }
        Ok(ConditioningCache {
            sigma,
            sqrt_total: total.sqrt(),
            steps,
        })
    }

    pub fn horizon(&self) -> usize {
        self.sigma.dim()
    }

    pub fn sigma(&self) -> &CovMatrix {
        &self.sigma
    }

    /// `sqrt(s_t)`, with `s_0` the sum over all of `Sigma`.
    pub fn sqrt_sum(&self, t: usize) -> f64 {
        if t == 0 {
            self.sqrt_total
        } else {
            self.steps[t - 1].sqrt_sum
        }
    }

    /// `(mu^k_(1), Sigma^k_(1,1))` for the first `k` latents `z`.
    fn lead(&self, k: usize, z: &[f64]) -> (f64, f64) {
        if k == 0 {
            (0.0, self.sigma.get(0, 0))
        } else {
            let s = &self.steps[k - 1];
            let mean = s.lead_gain.iter().zip(z).map(|(g, v)| g * v).sum();
            (mean, s.lead_var)
        }
    }

    fn lead_coefficient(&self, t: usize) -> Result<f64> {
        let lead = 1.0 + self.steps[t - 1].a[t - 1];
        if lead.abs() < DEGENERATE_LEAD {
            return Err(GlimError::Degenerate(format!(
                "1 + a^{t}_({t}) = {lead:.3e} is too close to zero"
            )));
        }
        Ok(lead)
    }

    /// `sum_{i<t} (1 + a^t_(i)) z_i`.
    fn weighted_prefix(&self, t: usize, z: &[f64]) -> f64 {
        self.steps[t - 1].a[..t - 1]
            .iter()
            .zip(z)
            .map(|(a, v)| (1.0 + a) * v)
            .sum()
    }
}

/// The per-step conditioning artifacts `(Sigma^t, a^t, s_t)` for `t = 0..T-1`.
pub fn conditioning_artifacts(sigma: &CovMatrix) -> Result<Vec<StepConditioning>> {
    let horizon = sigma.dim();
    let mut out = Vec::with_capacity(horizon);
    out.push(StepConditioning {
        t: 0,
        cov: sigma.clone(),
        a: Vec::new(),
        sum: sigma.total_sum(),
    });
    for t in 1..horizon {
        let reg = regress_trailing(sigma, t);
        let rest = horizon - t;
        let a = (0..t)
            .map(|c| kahan_sum((0..rest).map(|r| reg.gain[r * t + c])))
            .collect();
        let sum = kahan_sum(reg.cov.iter().copied());
        out.push(StepConditioning {
            t,
            cov: CovMatrix::new(rest, reg.cov)?,
            a,
            sum,
        });
    }
    Ok(out)
}

/// The unique intercept with `Y_0 = y0`: `Phi^{-1}(y0) sqrt(sum_ij Sigma_ij)`.
pub fn identify_gamma(y0: f64, sigma: &CovMatrix) -> Result<f64> {
    if !(y0 > 0.0 && y0 < 1.0) {
        return Err(GlimError::Domain(format!("y0 must lie in (0, 1), got {y0}")));
    }
    Ok(std_quantile(y0) * sigma.total_sum().sqrt())
}

/// One path's model: shared covariance artifacts plus its intercept.
#[derive(Clone, Debug)]
pub struct GlimPathModel {
    cache: Arc<ConditioningCache>,
    gamma: f64,
    eps: f64,
}

impl GlimPathModel {
    pub fn new(cache: Arc<ConditioningCache>, gamma: f64) -> Result<Self> {
        if !gamma.is_finite() {
            return Err(GlimError::InvalidArgument(format!("gamma must be finite, got {gamma}")));
        }
        Ok(GlimPathModel {
            cache,
            gamma,
            eps: DEFAULT_CLAMP,
        })
    }

    /// Model whose time-0 forecast is `y0`, clamped into `[eps, 1 - eps]` first.
    pub fn for_start(cache: Arc<ConditioningCache>, y0: f64, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(GlimError::InvalidArgument(format!("clamp must lie in (0, 0.5), got {eps}")));
        }
        if !(0.0..=1.0).contains(&y0) {
            return Err(GlimError::Domain(format!("y0 must lie in [0, 1], got {y0}")));
        }
        let gamma = identify_gamma(clamp_probability(y0, eps), cache.sigma())?;
        Ok(GlimPathModel { cache, gamma, eps })
    }

    pub fn from_sigma(sigma: CovMatrix, y0: f64) -> Result<Self> {
        GlimPathModel::for_start(Arc::new(ConditioningCache::new(sigma)?), y0, DEFAULT_CLAMP)
    }

    pub fn with_clamp(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon(&self) -> usize {
        self.cache.horizon()
    }

    pub fn cache(&self) -> &Arc<ConditioningCache> {
        &self.cache
    }

    pub fn clamp(&self) -> f64 {
        self.eps
    }

    /// `Y_0` implied by the model.
    pub fn start(&self) -> f64 {
        std_cdf(self.gamma / self.cache.sqrt_sum(0))
    }

    fn check_interior_len(&self, n: usize) -> Result<()> {
        let want = self.horizon() - 1;
        if n != want {
            return Err(GlimError::InvalidArgument(format!(
                "expected {want} interior values for horizon {}, got {n}",
                self.horizon()
            )));
        }
        Ok(())
    }

    /// Identifies `z_1..z_{T-1}` from the interior forecasts `y_1..y_{T-1}`.
    pub fn recover_latents(&self, interior: &[f64]) -> Result<LatentVector> {
        self.check_interior_len(interior.len())?;
        if interior.iter().any(|v| v.is_nan()) {
            return Err(GlimError::InvalidArgument("interior values contain NaN".into()));
        }
        let u: Vec<f64> = interior.iter().map(|&y| probit(y, self.eps)).collect();
        self.latents_from_probits(&u)
    }

    /// Same as [`Self::recover_latents`] with `u_t = Phi^{-1}(y_t)` already applied.
    pub fn latents_from_probits(&self, u: &[f64]) -> Result<LatentVector> {
        let mut z = Vec::with_capacity(u.len());
        for (k, &ut) in u.iter().enumerate() {
            let t = k + 1;
            let lead = self.cache.lead_coefficient(t)?;
            let known = self.gamma + self.cache.weighted_prefix(t, &z);
            z.push((self.cache.sqrt_sum(t) * ut - known) / lead);
        }
        LatentVector::new(z)
    }

    /// Mean and standard deviation of `Phi^{-1}(Y_t)` given `z_1..z_{t-1}`.
    pub fn step_params(&self, z_prefix: &[f64], t: usize) -> Result<(f64, f64)> {
        let horizon = self.horizon();
        if t == 0 || t >= horizon {
            return Err(GlimError::InvalidArgument(format!(
                "step must satisfy 1 <= t < {horizon}, got {t}"
            )));
        }
        if z_prefix.len() != t - 1 {
            return Err(GlimError::InvalidArgument(format!(
                "step {t} needs {} previous latents, got {}",
                t - 1,
                z_prefix.len()
            )));
        }
        Ok(self.step_moments(t, z_prefix)?)
    }

    fn step_moments(&self, t: usize, z: &[f64]) -> Result<(f64, f64)> {
        let lead = self.cache.lead_coefficient(t)?;
        let (prev_mean, prev_var) = self.cache.lead(t - 1, z);
        let known = self.gamma + self.cache.weighted_prefix(t, z);
        let root = self.cache.sqrt_sum(t);
        Ok(((known + lead * prev_mean) / root, prev_var.sqrt() * lead.abs() / root))
    }

    fn prefix_log_density(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut z = Vec::with_capacity(u.len());
        let mut total = 0.0;
        for (k, &ut) in u.iter().enumerate() {
            let t = k + 1;
            let (mu, sd) = self.step_moments(t, &z)?;
            let r = (ut - mu) / sd;
            total += -sd.ln() - 0.5 * r * r + 0.5 * ut * ut;
            let lead = self.cache.lead_coefficient(t)?;
            let known = self.gamma + self.cache.weighted_prefix(t, &z);
            z.push((self.cache.sqrt_sum(t) * ut - known) / lead);
        }
        Ok((total, z))
    }

    /// Log-density of the interior in probit coordinates, relative to the
    /// standard normal: `sum_t log N(u_t; mu_t, sd_t) - log N(u_t; 0, 1)`.
    pub fn interior_log_density(&self, u: &[f64]) -> Result<f64> {
        self.check_interior_len(u.len())?;
        Ok(self.prefix_log_density(u)?.0)
    }

    /// Log-likelihood of a path watched only until it leaves the band
    /// `[eps, 1 - eps]`. `u` holds the probits observed inside the band; if
    /// `exit` is set, the next step left through that side and contributes
    /// its tail probability.
    pub fn stopped_log_density(&self, u: &[f64], exit: Option<Exit>) -> Result<f64> {
        let limit = self.horizon() - 1;
        if u.len() > limit || (exit.is_some() && u.len() == limit) {
            return Err(GlimError::InvalidArgument(format!(
                "{} observed steps{} do not fit horizon {}",
                u.len(),
                if exit.is_some() { " plus an exit" } else { "" },
                self.horizon()
            )));
        }
        let (mut total, z) = self.prefix_log_density(u)?;
        if let Some(side) = exit {
            let (mu, sd) = self.step_moments(u.len() + 1, &z)?;
            let edge = -std_quantile(self.eps);
            total += match side {
                Exit::Upper => log_std_cdf((mu - edge) / sd),
                Exit::Lower => log_std_cdf((-edge - mu) / sd),
            };
        }
        Ok(total)
    }

    /// Like [`Self::log_density`], except that values outside `[eps, 1 - eps]`
    /// are treated as censored: the first such step contributes the
    /// probability of leaving through that side, and the rest of the path,
    /// outcome included, is ignored.
    pub fn censored_log_density(&self, path: &ProbabilityPath) -> Result<f64> {
        self.log_density_checks(path)?;
        let y = path.values();
        match first_exit(&y[1..self.horizon()], self.eps) {
            None => self.log_density(path),
            Some((k, side)) => {
                let u: Vec<f64> = y[1..=k].iter().map(|&v| probit(v, self.eps)).collect();
                self.stopped_log_density(&u, Some(side))
            }
        }
    }

    /// Exact log-density of `y_1..y_T` for a resolved path starting at this
    /// model's `y_0`. The endpoint enters as `Bernoulli(y_{T-1})`.
    pub fn log_density(&self, path: &ProbabilityPath) -> Result<f64> {
        let outcome = self.log_density_checks(path)?;
        let horizon = self.horizon();
        let y = path.values();
        let u: Vec<f64> = y[1..horizon].iter().map(|&v| probit(v, self.eps)).collect();
        Ok(self.interior_log_density(&u)? + terminal_log_prob(y[horizon - 1], outcome, self.eps))
    }

    fn log_density_checks(&self, path: &ProbabilityPath) -> Result<bool> {
        let horizon = self.horizon();
        if path.horizon() != horizon {
            return Err(GlimError::InvalidArgument(format!(
                "path '{}' has horizon {} but the model has {horizon}",
                path.id(),
                path.horizon()
            )));
        }
        let outcome = path.terminal().ok_or_else(|| {
            GlimError::InvalidArgument(format!("path '{}' has no resolved endpoint", path.id()))
        })?;
        let y = path.values();
        let start = clamp_probability(y[0], self.eps);
        if (self.start() - start).abs() > 1e-9 {
            return Err(GlimError::InvalidArgument(format!(
                "path '{}' starts at {start} but the model was identified at {}",
                path.id(),
                self.start()
            )));
        }
        Ok(outcome)
    }

    /// Forecast path implied by the latents `z_1..z_T`.
    pub fn path_from_latents(&self, z: &[f64]) -> Result<Vec<f64>> {
        let horizon = self.horizon();
        if z.len() != horizon {
            return Err(GlimError::InvalidArgument(format!(
                "expected {horizon} latents, got {}",
                z.len()
            )));
        }
        let mut y = Vec::with_capacity(horizon + 1);
        y.push(self.start());
        for t in 1..horizon {
            let a = &self.cache.steps[t - 1].a;
            let drift: f64 = a.iter().zip(z).map(|(a, v)| (1.0 + a) * v).sum();
            y.push(std_cdf((self.gamma + drift) / self.cache.sqrt_sum(t)));
        }
        let score = self.gamma + z.iter().sum::<f64>();
        y.push(if score >= 0.0 { 1.0 } else { 0.0 });
        Ok(y)
    }

    pub fn sample_latents<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let zeros = vec![0.0; self.horizon()];
        sample_with_factor(&zeros, self.cache.sigma().cholesky(), rng)
    }

    /// Draws `z ~ N(0, Sigma)` and maps it to a forecast path.
    pub fn sample_path<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = self.sample_latents(rng);
        self.path_from_latents(&z).expect("latent length matches horizon")
    }
}

/// Side through which a path left the band `[eps, 1 - eps]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Lower,
    Upper,
}

/// Index (0-based) and side of the first value outside `[eps, 1 - eps]`.
pub fn first_exit(values: &[f64], eps: f64) -> Option<(usize, Exit)> {
    values.iter().enumerate().find_map(|(k, &v)| {
        if v < eps {
            Some((k, Exit::Lower))
        } else if v > 1.0 - eps {
            Some((k, Exit::Upper))
        } else {
            None
        }
    })
}

/// `y_T log y_{T-1} + (1 - y_T) log(1 - y_{T-1})` with `y_{T-1}` clamped.
pub fn terminal_log_prob(last_interior: f64, outcome: bool, eps: f64) -> f64 {
    let p = clamp_probability(last_interior, eps);
    if outcome {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

/// Closed-form log-density for independent latents with variances `sigma2`.
///
/// With `R_t = sum_{i>t} sigma_i^2`, the step moments reduce to
/// `mu_t = Phi^{-1}(y_{t-1}) sqrt(R_{t-1} / R_t)` and `sd_t = sigma_t / sqrt(R_t)`.
pub fn diagonal_log_density(sigma2: &[f64], y: &[f64], eps: f64) -> Result<f64> {
    let horizon = sigma2.len();
    if horizon == 0 || y.len() != horizon + 1 {
        return Err(GlimError::InvalidArgument(format!(
            "expected {} path values for {horizon} variances, got {}",
            horizon + 1,
            y.len()
        )));
    }
    if sigma2.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(GlimError::InvalidArgument("variances must be positive and finite".into()));
    }
    let end = y[horizon];
    if end != 0.0 && end != 1.0 {
        return Err(GlimError::InvalidArgument("endpoint must be 0 or 1".into()));
    }
    // remaining[t] = sum_{i > t} sigma_i^2 (1-based i).
    let mut remaining = vec![0.0; horizon + 1];
    for t in (0..horizon).rev() {
        remaining[t] = remaining[t + 1] + sigma2[t];
    }
    let mut total = 0.0;
    let mut prev = probit(y[0], eps);
    for t in 1..horizon {
        let ut = probit(y[t], eps);
        let mu = prev * (remaining[t - 1] / remaining[t]).sqrt();
        let sd = sigma2[t - 1].sqrt() / remaining[t].sqrt();
        let r = (ut - mu) / sd;
        total += -sd.ln() - 0.5 * r * r + 0.5 * ut * ut;
        prev = ut;
    }
    Ok(total + terminal_log_prob(y[horizon - 1], end == 1.0, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{ar1_covariance, VarianceProfile};
    use crate::gaussian::mvn_condition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ar(rho: f64, sigma2: &[f64]) -> CovMatrix {
        ar1_covariance(rho, &VarianceProfile::new(sigma2.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(identify_gamma(0.5, &ar(0.4, &[1.0, 2.0])).unwrap(), 0.0);
        let g = identify_gamma(0.75, &CovMatrix::identity(10)).unwrap();
        let oracle = 0.674_489_750_196_081_7 * 10f64.sqrt();
        assert!((g - oracle).abs() < 1e-12);
        assert!((g - 2.132_923_9).abs() < 1e-7);
        let g = identify_gamma(0.25, &CovMatrix::identity(10)).unwrap();
        assert!((g + 2.132_923_9).abs() < 1e-7);
        assert!(matches!(identify_gamma(1.0, &CovMatrix::identity(2)), Err(GlimError::Domain(_))));
    }

    #[test]
    fn gamma_reproduces_start() {
        for y0 in [1e-6, 0.1, 0.37, 0.75, 0.999] {
            let m = GlimPathModel::from_sigma(ar(0.3, &[1.0, 1.5, 0.6, 2.0]), y0).unwrap();
            assert!((m.start() - y0).abs() < 1e-9);
        }
    }

    #[test]
    fn artifacts_for_diagonal_sigma() {
        let s = CovMatrix::diagonal(&[1.0, 2.0, 3.0]).unwrap();
        let arts = conditioning_artifacts(&s).unwrap();
        assert_eq!(arts[0].sum, 6.0);
        assert_eq!(arts[1].a, vec![0.0]);
        assert_eq!(arts[1].cov.entries(), &[2.0, 0.0, 0.0, 3.0]);
        assert_eq!(arts[2].a, vec![0.0, 0.0]);
        assert_eq!(arts[2].cov.entries(), &[3.0]);
    }

    #[test]
    fn artifacts_two_by_two() {
        let s = CovMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let arts = conditioning_artifacts(&s).unwrap();
        assert!((arts[1].a[0] - 0.5).abs() < 1e-15);
        assert!((arts[1].cov.get(0, 0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn artifacts_match_mvn_condition() {
        let s = ar(0.3, &[1.0, 1.0, 1.0]);
        let arts = conditioning_artifacts(&s).unwrap();
        for t in 1..3 {
            let z = vec![1.0; t];
            let c = mvn_condition(&s, t, &z).unwrap();
            assert_eq!(c.cov.entries(), arts[t].cov.entries());
            // With z = 1, a^t . z equals the sum of the conditional mean.
            let a_sum: f64 = arts[t].a.iter().sum();
            let m_sum: f64 = c.mean.iter().sum();
            assert!((a_sum - m_sum).abs() < 1e-14);
        }
    }

    #[test]
    fn recover_identity_roundtrip() {
        let m = GlimPathModel::from_sigma(CovMatrix::identity(2), 0.5).unwrap();
        let y = m.path_from_latents(&[1.0, 0.3]).unwrap();
        assert!((y[1] - 0.841_344_746_068_542_9).abs() < 1e-15);
        let z = m.recover_latents(&y[1..2]).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recover_near_boundary_is_finite() {
        let m = GlimPathModel::from_sigma(ar(0.2, &[1.0, 1.0, 1.0]), 0.6).unwrap();
        let z = m.recover_latents(&[1.0 - 1e-9, 1.0]).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
        assert!(z[0] > 5.0);
    }

    #[test]
    fn recover_reports_degenerate_lead() {
        // Sigma_21 / Sigma_11 = -1 makes 1 + a^1_(1) vanish.
        let s = CovMatrix::from_rows(&[vec![1.0, -1.0 + 1e-14], vec![-1.0 + 1e-14, 1.5]]).unwrap();
        let m = GlimPathModel::from_sigma(s, 0.5).unwrap();
        assert!(matches!(m.recover_latents(&[0.4]), Err(GlimError::Degenerate(_))));
    }

    #[test]
    fn step_params_identity() {
        let m = GlimPathModel::from_sigma(CovMatrix::identity(2), 0.5).unwrap();
        let (mu, sd) = m.step_params(&[], 1).unwrap();
        assert_eq!(mu, 0.0);
        // Z_1 ~ N(0, 1) and Phi^{-1}(Y_1) = Z_1 / sqrt(Var Z_2), so the scale is 1.
        assert!((sd - 1.0).abs() < 1e-15);
        assert!(m.step_params(&[], 2).is_err());
        assert!(m.step_params(&[0.1], 1).is_err());
    }

    #[test]
    fn step_params_match_closed_form_on_diagonal() {
        let v = [1.0, 0.7, 2.2, 1.3, 0.4];
        let m = GlimPathModel::from_sigma(CovMatrix::diagonal(&v).unwrap(), 0.3).unwrap();
        let z = m.sample_latents(&mut ChaCha8Rng::seed_from_u64(5));
        let y = m.path_from_latents(&z).unwrap();
        for t in 1..5 {
            let (mu, sd) = m.step_params(&z[..t - 1], t).unwrap();
            let after: f64 = v[t..].iter().sum();
            let from: f64 = v[t - 1..].iter().sum();
            let prev = std_quantile(y[t - 1]);
            assert!((mu - prev * (from / after).sqrt()).abs() < 1e-9, "t={t}");
            assert!((sd - v[t - 1].sqrt() / after.sqrt()).abs() < 1e-14, "t={t}");
        }
    }

    #[test]
    fn step_params_match_monte_carlo() {
        let s = ar(0.5, &[1.0, 1.6, 0.8]);
        let m = GlimPathModel::from_sigma(s.clone(), 0.65).unwrap();
        let z1 = 0.7;
        let (mu, sd) = m.step_params(&[z1], 2).unwrap();
        // Brute force: draw Z_2, Z_3 | Z_1 = z1 and push through the forecast map.
        let cond = mvn_condition(&s, 1, &[z1]).unwrap();
        let arts = conditioning_artifacts(&s).unwrap();
        let (a2, s2) = (arts[2].a.clone(), arts[2].sum);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 200_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let rest = crate::gaussian::mvn_sample(&cond.mean, &cond.cov, &mut rng).unwrap();
            let drift: f64 = [z1, rest[0]].iter().zip(&a2).map(|(z, a)| (1.0 + a) * z).sum();
            let u = (m.gamma() + drift) / s2.sqrt();
            sum += u;
            sq += u * u;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!((mean - mu).abs() < 4.0 * se, "mean {mean} vs {mu}");
        assert!((var.sqrt() - sd).abs() < 0.01 * sd, "sd {} vs {sd}", var.sqrt());
    }

    #[test]
    fn log_density_two_step_identity() {
        let m = GlimPathModel::from_sigma(CovMatrix::identity(2), 0.5).unwrap();
        let p = ProbabilityPath::new("p", vec![0.5, 0.5, 1.0], vec![]).unwrap();
        // Y_1 = Phi(Z_1) is uniform, so only the endpoint log(0.5) remains.
        let ld = m.log_density(&p).unwrap();
        assert!((ld - 0.5f64.ln()).abs() < 1e-14);
        assert!((diagonal_log_density(&[1.0, 1.0], p.values(), DEFAULT_CLAMP).unwrap() - ld).abs() < 1e-14);
    }

    #[test]
    fn log_density_mismatched_boundary_is_large_negative() {
        let m = GlimPathModel::from_sigma(CovMatrix::identity(3), 0.5).unwrap();
        let p = ProbabilityPath::new("p", vec![0.5, 0.9, 1.0, 0.0], vec![]).unwrap();
        let ld = m.log_density(&p).unwrap();
        // The endpoint contributes log(1e-9) against the clamped y_2.
        assert!(ld.is_finite() && ld < -10.0);
    }

    #[test]
    fn log_density_rejects_wrong_start() {
        let m = GlimPathModel::from_sigma(CovMatrix::identity(2), 0.5).unwrap();
        let p = ProbabilityPath::new("p", vec![0.6, 0.5, 1.0], vec![]).unwrap();
        assert!(m.log_density(&p).is_err());
    }

    #[test]
    fn path_from_latents_examples() {
        let v = [1.0, 2.0, 0.5];
        let m = GlimPathModel::from_sigma(CovMatrix::diagonal(&v).unwrap(), 0.7).unwrap();
        let y = m.path_from_latents(&[0.0; 3]).unwrap();
        for t in 1..3 {
            let s: f64 = v[t..].iter().sum();
            assert!((y[t] - std_cdf(m.gamma() / s.sqrt())).abs() < 1e-15);
            assert!(y[t] >= y[t - 1]);
        }
        let m0 = GlimPathModel::from_sigma(CovMatrix::identity(3), 0.5).unwrap();
        let y = m0.path_from_latents(&[0.4, -0.1, -0.3]).unwrap();
        assert_eq!(y[3], 1.0);
    }

    #[test]
    fn single_step_horizon() {
        let m = GlimPathModel::from_sigma(CovMatrix::identity(1), 0.3).unwrap();
        let p = ProbabilityPath::new("p", vec![0.3, 1.0], vec![]).unwrap();
        assert!((m.log_density(&p).unwrap() - 0.3f64.ln()).abs() < 1e-12);
        let y = m.sample_path(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(y.len(), 2);
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = GlimPathModel::from_sigma(ar(0.4, &[1.0, 2.0, 3.0, 4.0]), 0.4).unwrap();
        let a = m.sample_path(&mut ChaCha8Rng::seed_from_u64(3));
        let b = m.sample_path(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn complement_symmetry() {
        let s = ar(-0.3, &[1.0, 0.5, 1.7, 0.9]);
        let m = GlimPathModel::from_sigma(s.clone(), 0.8).unwrap();
        let cache = m.cache().clone();
        let flipped = GlimPathModel::new(cache, -m.gamma()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let z = m.sample_latents(&mut rng);
            let neg: Vec<f64> = z.iter().map(|v| -v).collect();
            let a = m.path_from_latents(&z).unwrap();
            let b = flipped.path_from_latents(&neg).unwrap();
            for t in 0..4 {
                assert!((a[t] + b[t] - 1.0).abs() <= 4.0 * f64::EPSILON, "t={t}");
            }
            assert_eq!(a[4] + b[4], 1.0);
        }
    }

    #[test]
    fn censored_density_inside_band_matches_exact() {
        let m = GlimPathModel::from_sigma(ar(0.3, &[1.0, 0.7, 0.5]), 0.6).unwrap();
        let p = ProbabilityPath::new("a", vec![0.6, 0.7, 0.9, 1.0], vec![]).unwrap();
        assert_eq!(m.censored_log_density(&p).unwrap(), m.log_density(&p).unwrap());
    }

    #[test]
    fn exit_at_first_step_on_identity() {
        // U_1 ~ N(0, 1), so leaving above 1 - eps has probability eps.
        let m = GlimPathModel::from_sigma(CovMatrix::identity(2), 0.5).unwrap();
        let up = ProbabilityPath::new("a", vec![0.5, 1.0, 0.0], vec![]).unwrap();
        let down = ProbabilityPath::new("b", vec![0.5, 1e-12, 0.0], vec![]).unwrap();
        let want = (1e-9f64).ln();
        assert!((m.censored_log_density(&up).unwrap() - want).abs() < 1e-6);
        assert!((m.censored_log_density(&down).unwrap() - want).abs() < 1e-6);
        assert!(m.stopped_log_density(&[0.1], Some(Exit::Upper)).is_err());
    }

    #[test]
    fn stopped_likelihood_is_normalized() {
        // Band mass by quadrature over both outcomes, plus the two exit masses.
        let eps = 1e-3;
        let m = GlimPathModel::from_sigma(ar(0.4, &[1.0, 0.3]), 0.7).unwrap().with_clamp(eps);
        let edge = -std_quantile(eps);
        let n = 20_000;
        let h = 2.0 * edge / n as f64;
        let mut band = 0.0;
        for i in 0..=n {
            let u = -edge + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let f = m.stopped_log_density(&[u], None).unwrap().exp() * crate::gaussian::std_pdf(u);
            band += w * h * f;
        }
        let up = m.stopped_log_density(&[], Some(Exit::Upper)).unwrap().exp();
        let down = m.stopped_log_density(&[], Some(Exit::Lower)).unwrap().exp();
        assert!((band + up + down - 1.0).abs() < 1e-8, "{band} + {up} + {down}");
    }

    #[test]
    fn first_exit_reports_side() {
        assert_eq!(first_exit(&[0.5, 0.2], 1e-9), None);
        assert_eq!(first_exit(&[0.5, 1.0, 0.0], 1e-9), Some((1, Exit::Upper)));
        assert_eq!(first_exit(&[1e-10], 1e-9), Some((0, Exit::Lower)));
        assert_eq!(first_exit(&[1e-9], 1e-9), None);
    }
}
