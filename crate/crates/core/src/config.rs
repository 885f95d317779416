//! Run settings from a TOML file whose keys are flattened to dotted names
//! (`fit.restarts`, `covariance.rho_free`, ...). Any key can be overridden
//! from the command line with `--<dotted.name> <value>`.

use std::collections::BTreeMap;
use std::path::Path;

use toml::Value;

use crate::covariance::{default_p_bounds, VarianceFn};
use crate::error::{GlimError, Result};
use crate::inference::{FitConfig, FitMode, Prior, Saturation};
use crate::metrics::DEFAULT_ALPHAS;
use crate::path::DEFAULT_CLAMP;
use crate::synth::{CovariateScheme, RecoveryConfig, SynthSpec};

/// Every recognized key.
pub const KEYS: &[&str] = &[
    "seed",
    "clamp",
    "samples",
    "threads",
    "covariance.rho_free",
    "covariance.variance_fn",
    "covariance.c",
    "covariance.c_t",
    "covariance.c_t_offset",
    "covariance.renormalize",
    "covariance.p",
    "covariance.p_bounds",
    "fit.mode",
    "fit.restarts",
    "fit.max_iter",
    "fit.tol",
    "fit.chains",
    "fit.warmup",
    "fit.draws",
    "fit.proposal_scale",
    "fit.prior_loc",
    "fit.prior_scale",
    "fit.prior_only",
    "fit.saturation",
    "metrics.checkpoints",
    "metrics.alphas",
    "synth.horizon",
    "synth.y0",
    "synth.beta",
    "synth.rho",
    "synth.n_paths",
    "synth.scheme",
    "recover.full",
    "recover.mode",
    "recover.betas",
    "recover.rhos",
    "recover.replicates",
    "recover.paths",
    "recover.horizon",
    "recover.y0",
    "recover.scheme",
];

/// Flat map from dotted key to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigMap {
    values: BTreeMap<String, Value>,
}

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other);
            }
        }
    }
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| GlimError::Config(format!("{e}")))?;
        let mut values = BTreeMap::new();
        flatten("", table, &mut values);
        let map = ConfigMap { values };
        map.check_keys()?;
        Ok(map)
    }

    pub fn load(file: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(file).map_err(|e| GlimError::io(file, e))?;
        ConfigMap::parse(&text).map_err(|e| match e {
            GlimError::Config(msg) => GlimError::Config(format!("{}: {msg}", file.display())),
            other => other,
        })
    }

    fn check_keys(&self) -> Result<()> {
        match self.values.keys().find(|k| !KEYS.contains(&k.as_str())) {
            Some(k) => Err(GlimError::Config(format!("unknown key '{k}'"))),
            None => Ok(()),
        }
    }

    /// Sets `key` from command-line text, read as a TOML value when it parses
    /// as one and as a bare string otherwise.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(GlimError::Config(format!("unknown key '{key}'")));
        }
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => Value::String(raw.to_string()),
        };
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn bad(key: &str, want: &str, v: &Value) -> GlimError {
        GlimError::Config(format!("{key} must be {want}, got {v}"))
    }

    pub fn float(&self, key: &str) -> Result<Option<f64>> {
        self.values
            .get(key)
            .map(|v| match v {
                Value::Float(f) => Ok(*f),
                Value::Integer(i) => Ok(*i as f64),
                other => Err(ConfigMap::bad(key, "a number", other)),
            })
            .transpose()
    }

    pub fn count(&self, key: &str) -> Result<Option<usize>> {
        self.values
            .get(key)
            .map(|v| match v {
                Value::Integer(i) if *i >= 0 => Ok(*i as usize),
                other => Err(ConfigMap::bad(key, "a non-negative integer", other)),
            })
            .transpose()
    }

    pub fn seed(&self, key: &str) -> Result<Option<u64>> {
        self.values
            .get(key)
            .map(|v| match v {
                Value::Integer(i) if *i >= 0 => Ok(*i as u64),
                other => Err(ConfigMap::bad(key, "a non-negative integer", other)),
            })
            .transpose()
    }

    pub fn flag(&self, key: &str) -> Result<Option<bool>> {
        self.values
            .get(key)
            .map(|v| match v {
                Value::Boolean(b) => Ok(*b),
                other => Err(ConfigMap::bad(key, "true or false", other)),
            })
            .transpose()
    }

    pub fn text(&self, key: &str) -> Result<Option<String>> {
        self.values
            .get(key)
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                other => Err(ConfigMap::bad(key, "a string", other)),
            })
            .transpose()
    }

    /// A number list; a single number counts as a one-element list.
    pub fn floats(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(v) = self.values.get(key) else {
            return Ok(None);
        };
        let one = |x: &Value| match x {
            Value::Float(f) => Ok(*f),
            Value::Integer(i) => Ok(*i as f64),
            _ => Err(ConfigMap::bad(key, "a number or list of numbers", v)),
        };
        match v {
            Value::Array(items) => items.iter().map(one).collect::<Result<_>>().map(Some),
            other => Ok(Some(vec![one(other)?])),
        }
    }

    pub fn counts(&self, key: &str) -> Result<Option<Vec<usize>>> {
        let Some(v) = self.values.get(key) else {
            return Ok(None);
        };
        let one = |x: &Value| match x {
            Value::Integer(i) if *i >= 0 => Ok(*i as usize),
            _ => Err(ConfigMap::bad(key, "a list of non-negative integers", v)),
        };
        match v {
            Value::Array(items) => items.iter().map(one).collect::<Result<_>>().map(Some),
            other => Ok(Some(vec![one(other)?])),
        }
    }
}

fn parse_mode(key: &str, s: &str) -> Result<FitMode> {
    match s {
        "mle" => Ok(FitMode::Mle),
        "mcmc" => Ok(FitMode::Mcmc),
        other => Err(GlimError::Config(format!("{key} must be 'mle' or 'mcmc', got '{other}'"))),
    }
}

fn parse_scheme(key: &str, s: &str) -> Result<CovariateScheme> {
    match s {
        "constant-1" => Ok(CovariateScheme::Constant1),
        "binary-half" => Ok(CovariateScheme::BinaryHalf),
        other => Err(GlimError::Config(format!(
            "{key} must be 'constant-1' or 'binary-half', got '{other}'"
        ))),
    }
}

/// Fully resolved settings for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub clamp: f64,
    pub samples: usize,
    pub threads: Option<usize>,
    pub fit: FitConfig,
    /// `None` means the default early/middle/late checkpoints.
    pub checkpoints: Option<Vec<usize>>,
    pub alphas: Vec<f64>,
    pub synth: SynthSpec,
    pub recover: RecoveryConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings::from_map(&ConfigMap::default()).expect("defaults are valid")
    }
}

fn variance_fn(map: &ConfigMap) -> Result<VarianceFn> {
    let name = map.text("covariance.variance_fn")?.unwrap_or_else(|| "exp-linear".into());
    let vf = match name.as_str() {
        "exp-linear" => VarianceFn::ExpLinear,
        "sigmoid-scaled" => VarianceFn::SigmoidScaled {
            c: map
                .float("covariance.c")?
                .ok_or_else(|| GlimError::Config("sigmoid-scaled needs covariance.c".into()))?,
        },
        "quadratic-softplus" => {
            let p_bounds = match map.floats("covariance.p_bounds")? {
                None => default_p_bounds(),
                Some(v) if v.len() == 2 => (v[0], v[1]),
                Some(v) => {
                    return Err(GlimError::Config(format!(
                        "covariance.p_bounds needs two numbers, got {}",
                        v.len()
                    )))
                }
            };
            VarianceFn::QuadraticSoftplus {
                p: map.float("covariance.p")?.unwrap_or(0.5 * (p_bounds.0 + p_bounds.1)),
                p_bounds,
                c_t: map
                    .floats("covariance.c_t")?
                    .ok_or_else(|| GlimError::Config("quadratic-softplus needs covariance.c_t".into()))?,
                c_offset: map.count("covariance.c_t_offset")?.unwrap_or(0),
                renormalize: map.flag("covariance.renormalize")?.unwrap_or(false),
            }
        }
        other => {
            return Err(GlimError::Config(format!(
                "covariance.variance_fn must be one of {}, got '{other}'",
                VarianceFn::NAMES.join(", ")
            )))
        }
    };
    vf.validate()?;
    Ok(vf)
}

fn priors(map: &ConfigMap) -> Result<Vec<Prior>> {
    let loc = map.floats("fit.prior_loc")?;
    let scale = map.floats("fit.prior_scale")?;
    if loc.is_none() && scale.is_none() {
        return Ok(Vec::new());
    }
    let loc = loc.unwrap_or_else(|| vec![0.0]);
    let scale = scale.unwrap_or_else(|| vec![1.0]);
    let n = loc.len().max(scale.len());
    let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
    if (loc.len() != 1 && loc.len() != n) || (scale.len() != 1 && scale.len() != n) {
        return Err(GlimError::Config("fit.prior_loc and fit.prior_scale lengths disagree".into()));
    }
    Ok((0..n)
        .map(|i| Prior {
            loc: pick(&loc, i),
            scale: pick(&scale, i),
        })
        .collect())
}

impl Settings {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        map.check_keys()?;
        let seed = map.seed("seed")?.unwrap_or(0);
        let clamp = map.float("clamp")?.unwrap_or(DEFAULT_CLAMP);
        let samples = map.count("samples")?.unwrap_or(100);
        if samples < 2 {
            return Err(GlimError::Config(format!("samples must be at least 2, got {samples}")));
        }
        let threads = map.count("threads")?;
        if threads == Some(0) {
            return Err(GlimError::Config("threads must be positive".into()));
        }

        let mut fit = FitConfig {
            variance_fn: variance_fn(map)?,
            priors: priors(map)?,
            seed,
            clamp,
            ..FitConfig::default()
        };
        if let Some(m) = map.text("fit.mode")? {
            fit.mode = parse_mode("fit.mode", &m)?;
        }
        if let Some(v) = map.text("fit.saturation")? {
            fit.saturation = match v.as_str() {
                "censor" => Saturation::Censor,
                "clamp" => Saturation::Clamp,
                other => {
                    return Err(GlimError::Config(format!(
                        "fit.saturation must be 'censor' or 'clamp', got '{other}'"
                    )))
                }
            };
        }
        if let Some(b) = map.flag("covariance.rho_free")? {
            fit.rho_free = b;
        }
        if let Some(v) = map.count("fit.restarts")? {
            fit.mle.restarts = v;
        }
        if let Some(v) = map.count("fit.max_iter")? {
            fit.mle.max_iter = v;
        }
        if let Some(v) = map.float("fit.tol")? {
            fit.mle.tol = v;
        }
        if let Some(v) = map.count("fit.chains")? {
            fit.mcmc.chains = v;
        }
        if let Some(v) = map.count("fit.warmup")? {
            fit.mcmc.warmup = v;
        }
        if let Some(v) = map.count("fit.draws")? {
            fit.mcmc.draws = v;
        }
        if let Some(v) = map.float("fit.proposal_scale")? {
            fit.mcmc.proposal_scale = v;
        }
        if let Some(v) = map.flag("fit.prior_only")? {
            fit.prior_only = v;
        }
        fit.validate()?;

        let checkpoints = map.counts("metrics.checkpoints")?;
        let alphas = map.floats("metrics.alphas")?.unwrap_or_else(|| DEFAULT_ALPHAS.to_vec());

        let mut synth = SynthSpec {
            variance_fn: fit.variance_fn.clone(),
            seed,
            ..SynthSpec::default()
        };
        if let Some(v) = map.count("synth.horizon")? {
            synth.horizon = v;
        }
        if let Some(v) = map.float("synth.y0")? {
            synth.y0 = v;
        }
        if let Some(v) = map.floats("synth.beta")? {
            synth.beta = v;
        }
        if let Some(v) = map.float("synth.rho")? {
            synth.rho = v;
        }
        if let Some(v) = map.count("synth.n_paths")? {
            synth.n_paths = v;
        }
        if let Some(s) = map.text("synth.scheme")? {
            synth.scheme = parse_scheme("synth.scheme", &s)?;
        }

        let mut recover = if map.flag("recover.full")?.unwrap_or(false) {
            RecoveryConfig::full()
        } else {
            RecoveryConfig::default()
        };
        recover.seed = seed;
        recover.fit = FitConfig {
            mode: FitMode::Mle,
            variance_fn: VarianceFn::ExpLinear,
            ..fit.clone()
        };
        if let Some(m) = map.text("recover.mode")? {
            recover.fit.mode = parse_mode("recover.mode", &m)?;
        }
        if let Some(v) = map.floats("recover.betas")? {
            recover.betas = v;
        }
        if let Some(v) = map.floats("recover.rhos")? {
            recover.rhos = v;
        }
        if let Some(v) = map.count("recover.replicates")? {
            recover.replicates = v;
        }
        if let Some(v) = map.count("recover.paths")? {
            recover.paths_per_set = v;
        }
        if let Some(v) = map.count("recover.horizon")? {
            recover.horizon = v;
        }
        if let Some(v) = map.float("recover.y0")? {
            recover.y0 = v;
        }
        if let Some(s) = map.text("recover.scheme")? {
            recover.scheme = parse_scheme("recover.scheme", &s)?;
        }

        Ok(Settings {
            seed,
            clamp,
            samples,
            threads,
            fit,
            checkpoints,
            alphas,
            synth,
            recover,
        })
    }
}
