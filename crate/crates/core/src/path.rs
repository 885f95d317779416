//! Probability paths, datasets of paths, and simulated ensembles.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{GlimError, Issue, Result};
use crate::gaussian::std_quantile;

/// Default clamp applied to interior probabilities before the probit transform.
pub const DEFAULT_CLAMP: f64 = 1e-9;

#[inline]
pub fn clamp_probability(y: f64, eps: f64) -> f64 {
    y.clamp(eps, 1.0 - eps)
}

/// `Phi^{-1}` of a probability clamped into `[eps, 1 - eps]`.
#[inline]
pub fn probit(y: f64, eps: f64) -> f64 {
    std_quantile(clamp_probability(y, eps))
}

/// Sum of squared increments of a trajectory.
pub fn realized_volatility(y: &[f64]) -> Result<f64> {
    if y.len() < 2 {
        return Err(GlimError::InvalidArgument(
            "realized volatility needs at least two points".into(),
        ));
    }
    if let Some(t) = y.iter().position(|v| !v.is_finite()) {
        return Err(GlimError::InvalidArgument(format!(
            "path has a missing entry at t={t}"
        )));
    }
    Ok(y.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum())
}

/// One trajectory `y_0..y_T` with its covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityPath {
    id: String,
    y: Vec<f64>,
    covariates: Vec<f64>,
    resolved: bool,
}

impl ProbabilityPath {
    /// A path whose final value is the realized outcome, exactly 0 or 1.
    pub fn new(id: impl Into<String>, y: Vec<f64>, covariates: Vec<f64>) -> Result<Self> {
        let raw = RawPath::new(id, y, covariates);
        let issues = raw.issues(TerminalRule::Required);
        if !issues.is_empty() {
            return Err(GlimError::Validation(issues));
        }
        Ok(raw.into_path(TerminalRule::Required))
    }

    /// A path that may stop before resolution; `y_T` is any probability.
    pub fn unresolved(id: impl Into<String>, y: Vec<f64>, covariates: Vec<f64>) -> Result<Self> {
        let raw = RawPath::new(id, y, covariates);
        let issues = raw.issues(TerminalRule::Optional);
        if !issues.is_empty() {
            return Err(GlimError::Validation(issues));
        }
        Ok(raw.into_path(TerminalRule::Optional))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn horizon(&self) -> usize {
        self.y.len() - 1
    }

    pub fn y0(&self) -> f64 {
        self.y[0]
    }

    /// The realized outcome, if the path resolved.
    pub fn terminal(&self) -> Option<bool> {
        self.resolved.then(|| self.y[self.horizon()] == 1.0)
    }

    pub fn is_resolved(&self) -> bool {
        self.resolved
    }

    pub fn realized_volatility(&self) -> f64 {
        self.y.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum()
    }

    pub fn to_raw(&self) -> RawPath {
        RawPath::new(self.id.clone(), self.y.clone(), self.covariates.clone())
    }
}

/// Whether validation insists on a resolved 0/1 endpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminalRule {
    Required,
    /// Endpoints equal to exactly 0 or 1 count as resolved; others are kept as probabilities.
    Optional,
}

/// Unvalidated path as read from input. Missing entries are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPath {
    pub id: String,
    pub y: Vec<f64>,
    pub covariates: Vec<f64>,
}

impl RawPath {
    pub fn new(id: impl Into<String>, y: Vec<f64>, covariates: Vec<f64>) -> Self {
        RawPath {
            id: id.into(),
            y,
            covariates,
        }
    }

    fn issues(&self, rule: TerminalRule) -> Vec<Issue> {
        let mut out = Vec::new();
        let issue = |index: Option<usize>, message: String| Issue {
            path_id: self.id.clone(),
            index,
            message,
        };
        if self.y.len() < 2 {
            out.push(issue(None, format!("horizon must be at least 1, got {} points", self.y.len())));
            return out;
        }
        for (t, &v) in self.y.iter().enumerate() {
            if v.is_nan() {
                out.push(issue(Some(t), "missing value".into()));
            } else if !(0.0..=1.0).contains(&v) {
                out.push(issue(Some(t), format!("value {v} is outside [0, 1]")));
            }
        }
        let last = self.y.len() - 1;
        let end = self.y[last];
        if rule == TerminalRule::Required && (0.0..=1.0).contains(&end) && end != 0.0 && end != 1.0 {
            out.push(issue(Some(last), format!("terminal value {end} is not exactly 0 or 1")));
        }
        if let Some(k) = self.covariates.iter().position(|c| !c.is_finite()) {
            out.push(issue(None, format!("covariate {} is not finite", k + 1)));
        }
        out
    }

    fn into_path(self, rule: TerminalRule) -> ProbabilityPath {
        let end = *self.y.last().expect("non-empty");
        let resolved = match rule {
            TerminalRule::Required => true,
            TerminalRule::Optional => end == 0.0 || end == 1.0,
        };
        ProbabilityPath {
            id: self.id,
            y: self.y,
            covariates: self.covariates,
            resolved,
        }
    }
}

/// Paths sharing one horizon and covariate schema. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathDataset {
    horizon: usize,
    covariate_names: Vec<String>,
    paths: Vec<ProbabilityPath>,
}

impl PathDataset {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn paths(&self) -> &[ProbabilityPath] {
        &self.paths
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ProbabilityPath> {
        self.paths.iter().find(|p| p.id == id)
    }

    pub fn into_raw(self) -> Vec<RawPath> {
        self.paths.iter().map(ProbabilityPath::to_raw).collect()
    }

    /// Builds a dataset from paths that are already individually valid.
    pub fn from_paths(covariate_names: Vec<String>, paths: Vec<ProbabilityPath>) -> Result<Self> {
        let rule = if paths.iter().all(ProbabilityPath::is_resolved) {
            TerminalRule::Required
        } else {
            TerminalRule::Optional
        };
        validate_dataset(paths.into_iter().map(|p| p.to_raw()).collect(), covariate_names, rule)
    }
}

/// Checks every dataset invariant and reports all offenders at once.
pub fn validate_dataset(
    raw: Vec<RawPath>,
    covariate_names: Vec<String>,
    rule: TerminalRule,
) -> Result<PathDataset> {
    if raw.is_empty() {
        return Err(GlimError::Validation(vec![Issue {
            path_id: String::new(),
            index: None,
            message: "dataset contains no paths".into(),
        }]));
    }
    let horizon = raw[0].y.len().saturating_sub(1);
    let arity = covariate_names.len();
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    for path in &raw {
        if !seen.insert(path.id.as_str()) {
            issues.push(Issue {
                path_id: path.id.clone(),
                index: None,
                message: "duplicate path id".into(),
            });
        }
        if path.y.len().saturating_sub(1) != horizon {
            issues.push(Issue {
                path_id: path.id.clone(),
                index: None,
                message: format!(
                    "horizon T={} differs from the dataset horizon T={horizon}",
                    path.y.len().saturating_sub(1)
                ),
            });
        }
        if path.covariates.len() != arity {
            issues.push(Issue {
                path_id: path.id.clone(),
                index: None,
                message: format!(
                    "expected {arity} covariates, got {}",
                    path.covariates.len()
                ),
            });
        }
        issues.extend(path.issues(rule));
    }
    if !issues.is_empty() {
        return Err(GlimError::Validation(issues));
    }
    Ok(PathDataset {
        horizon,
        covariate_names,
        paths: raw.into_iter().map(|r| r.into_path(rule)).collect(),
    })
}

/// Simulated trajectories for one observed path.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleEntry {
    pub path_id: String,
    pub y0: f64,
    pub samples: Vec<Vec<f64>>,
}

/// For each observed path, `M` simulated trajectories starting at its `y_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationEnsemble {
    horizon: usize,
    entries: Vec<EnsembleEntry>,
}

/// Tolerance for a simulated start matching the observed `y_0`.
const START_TOLERANCE: f64 = 1e-9;

impl SimulationEnsemble {
    pub fn new(horizon: usize, entries: Vec<EnsembleEntry>) -> Result<Self> {
        let mut issues = Vec::new();
        let mut seen = HashSet::new();
        for e in &entries {
            let issue = |index: Option<usize>, message: String| Issue {
                path_id: e.path_id.clone(),
                index,
                message,
            };
            if !seen.insert(e.path_id.as_str()) {
                issues.push(issue(None, "duplicate path id in ensemble".into()));
            }
            for (s, sample) in e.samples.iter().enumerate() {
                if sample.len() != horizon + 1 {
                    issues.push(issue(
                        None,
                        format!("sample {s} has {} points, expected {}", sample.len(), horizon + 1),
                    ));
                    continue;
                }
                if (sample[0] - e.y0).abs() > START_TOLERANCE {
                    issues.push(issue(Some(0), format!("sample {s} starts at {} not {}", sample[0], e.y0)));
                }
                if let Some(t) = sample.iter().position(|v| !(0.0..=1.0).contains(v)) {
                    issues.push(issue(Some(t), format!("sample {s} value outside [0, 1]")));
                }
                let end = sample[horizon];
                if end != 0.0 && end != 1.0 {
                    issues.push(issue(Some(horizon), format!("sample {s} endpoint {end} is not 0 or 1")));
                }
            }
        }
        if !issues.is_empty() {
            return Err(GlimError::Validation(issues));
        }
        Ok(SimulationEnsemble { horizon, entries })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn entries(&self) -> &[EnsembleEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Smallest sample count over entries.
    pub fn min_samples(&self) -> usize {
        self.entries.iter().map(|e| e.samples.len()).min().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(id: &str, y: &[f64]) -> RawPath {
        RawPath::new(id, y.to_vec(), vec![1.0])
    }

    #[test]
    fn volatility_examples() {
        assert_eq!(realized_volatility(&[0.5, 0.5, 0.5]).unwrap(), 0.0);
        assert!((realized_volatility(&[0.5, 0.8, 1.0]).unwrap() - 0.13).abs() < 1e-15);
        assert_eq!(realized_volatility(&[0.5, 0.0]).unwrap(), 0.25);
    }

    #[test]
    fn volatility_rejects_missing() {
        assert!(matches!(
            realized_volatility(&[0.5, f64::NAN, 1.0]),
            Err(GlimError::InvalidArgument(_))
        ));
    }

    fn seven_step(id: &str) -> RawPath {
        raw(id, &[0.4, 0.5, 0.45, 0.6, 0.7, 0.65, 0.8, 1.0])
    }

    #[test]
    fn accepts_two_well_formed_paths() {
        let ds = validate_dataset(
            vec![seven_step("a"), seven_step("b")],
            vec!["x".into()],
            TerminalRule::Required,
        )
        .unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.horizon(), 7);
    }

    #[test]
    fn reports_out_of_range_value_with_index() {
        let mut bad = seven_step("bad");
        bad.y[3] = 1.2;
        let err = validate_dataset(vec![seven_step("ok"), bad], vec!["x".into()], TerminalRule::Required)
            .unwrap_err();
        match err {
            GlimError::Validation(issues) => {
                assert_eq!(issues.len(), 1);
                assert_eq!(issues[0].path_id, "bad");
                assert_eq!(issues[0].index, Some(3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reports_mixed_horizons() {
        let mut y = vec![0.5; 10];
        y.push(1.0);
        let long = raw("long", &y);
        let err = validate_dataset(vec![seven_step("a"), long], vec!["x".into()], TerminalRule::Required)
            .unwrap_err();
        assert!(err.to_string().contains("long"));
    }

    #[test]
    fn reports_duplicates_and_terminal() {
        let mut open = seven_step("a");
        open.y[7] = 0.9;
        let err = validate_dataset(
            vec![seven_step("a"), open],
            vec!["x".into()],
            TerminalRule::Required,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duplicate"));
        assert!(msg.contains("terminal"));
    }

    #[test]
    fn optional_terminal_keeps_probability_endpoint() {
        let mut open = seven_step("a");
        open.y[7] = 0.9;
        let ds = validate_dataset(vec![open], vec!["x".into()], TerminalRule::Optional).unwrap();
        assert_eq!(ds.paths()[0].terminal(), None);
    }

    #[test]
    fn interior_extremes_are_kept_and_clamped_for_probit() {
        let ds = validate_dataset(
            vec![raw("a", &[0.5, 1.0, 0.0, 1.0])],
            vec!["x".into()],
            TerminalRule::Required,
        )
        .unwrap();
        assert_eq!(ds.paths()[0].values()[1], 1.0);
        assert!(probit(1.0, DEFAULT_CLAMP).is_finite());
        assert!(probit(0.0, DEFAULT_CLAMP) < -5.9);
    }

    #[test]
    fn ensemble_checks_start_and_endpoint() {
        let good = EnsembleEntry {
            path_id: "a".into(),
            y0: 0.5,
            samples: vec![vec![0.5, 0.6, 1.0]],
        };
        assert!(SimulationEnsemble::new(2, vec![good.clone()]).is_ok());
        let mut bad = good.clone();
        bad.samples[0][2] = 0.7;
        assert!(SimulationEnsemble::new(2, vec![bad]).is_err());
        let mut shifted = good;
        shifted.samples[0][0] = 0.6;
        assert!(SimulationEnsemble::new(2, vec![shifted]).is_err());
    }

    fn path_strategy() -> impl Strategy<Value = Vec<f64>> {
        (1usize..12).prop_flat_map(|t| {
            (
                proptest::collection::vec(0.0f64..=1.0, t),
                any::<bool>(),
            )
                .prop_map(|(mut y, end)| {
                    y.push(if end { 1.0 } else { 0.0 });
                    y
                })
        })
    }

    proptest! {
        #[test]
        fn volatility_complement_symmetric(y in path_strategy()) {
            let flipped: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
            let a = realized_volatility(&y).unwrap();
            let b = realized_volatility(&flipped).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn validation_is_idempotent(paths in proptest::collection::vec(path_strategy(), 1..5)) {
            let t = paths[0].len();
            let raws: Vec<RawPath> = paths
                .into_iter()
                .filter(|y| y.len() == t)
                .enumerate()
                .map(|(i, y)| RawPath::new(format!("p{i}"), y, vec![0.5]))
                .collect();
            let first = validate_dataset(raws, vec!["x".into()], TerminalRule::Required).unwrap();
            let again = validate_dataset(first.clone().into_raw(), vec!["x".into()], TerminalRule::Required).unwrap();
            prop_assert_eq!(first, again);
        }
    }
}
