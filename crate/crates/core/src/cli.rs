//! The `glim` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{ConfigMap, Settings};
use crate::error::{GlimError, Result};
use crate::fitted::{fit_model, simulate_ensemble, FittedModel, ModelKind};
use crate::inference::FitStatus;
use crate::io::{load_dataset, read_ensemble, write_covariates, write_ensemble, write_paths};
use crate::metrics::{default_checkpoints, evaluate};
use crate::path::TerminalRule;
use crate::synth::{generate_dataset, run_recovery, RecoveryReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "glim", version, about = "Fit, simulate and evaluate probability-path models")]
struct Cli {
    /// TOML settings file; any key can also be passed as --<key> <value>.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for per-path work.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Path values, `path_id,t,y`.
    #[arg(long, value_name = "FILE")]
    paths: PathBuf,
    /// Covariates, `path_id,<name1>,...`.
    #[arg(long, value_name = "FILE")]
    covariates: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Mle,
    Mcmc,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check path and covariate files.
    Validate(DataArgs),
    /// Fit a model and write fit.json.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "glim")]
        model: ModelKind,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Simulate paths from a fit and write ensemble.csv.
    Simulate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "FILE")]
        fit: PathBuf,
        /// Must match the fit file when given.
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        /// Samples per path.
        #[arg(long, value_name = "M")]
        samples: Option<usize>,
    },
    /// Score an ensemble against observed paths; writes metrics.json and metrics.csv.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        paths: PathBuf,
        #[arg(long, value_name = "FILE")]
        ensemble: PathBuf,
    },
    /// Generate a synthetic dataset; writes paths.csv and covariates.csv.
    Synth,
    /// Run the parameter recovery grid; writes recovery.csv and recovery.json.
    Recover {
        /// Use the full 5x5 grid with 50 replicates.
        #[arg(long)]
        full: bool,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
}

fn exit_code(e: &GlimError) -> i32 {
    match e {
        GlimError::Numerical(_) | GlimError::Range(_) | GlimError::Degenerate(_) | GlimError::Fit(_) => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

/// Pulls `--a.b value` and `--a.b=value` pairs out of `args`.
fn split_overrides(args: Vec<OsString>) -> (Vec<OsString>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let text = arg.to_string_lossy().into_owned();
        let Some(flag) = text.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = inline.or_else(|| it.next().map(|v| v.to_string_lossy().into_owned()));
        overrides.push((name, value.unwrap_or_default()));
    }
    (rest, overrides)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GlimError::io(dir, e))
}

fn write_json<T: serde::Serialize>(file: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(file, text + "\n").map_err(|e| GlimError::io(file, e))
}

fn write_rows<const N: usize>(file: &Path, header: [&str; N], rows: &[[String; N]]) -> Result<()> {
    let mut w = csv::Writer::from_path(file).map_err(|e| GlimError::Input(format!("{}: {e}", file.display())))?;
    let fail = |e: csv::Error| GlimError::Input(format!("{}: {e}", file.display()));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    w.flush().map_err(|e| GlimError::io(file, e))
}

fn settings(cli: &Cli, overrides: &[(String, String)], extra: &[(&str, String)]) -> Result<Settings> {
    let mut map = match &cli.config {
        Some(file) => ConfigMap::load(file)?,
        None => ConfigMap::default(),
    };
    for (k, v) in overrides {
        map.set(k, v)?;
    }
    if let Some(s) = cli.seed {
        map.set("seed", &s.to_string())?;
    }
    if let Some(t) = cli.threads {
        map.set("threads", &t.to_string())?;
    }
    for (k, v) in extra {
        map.set(k, v)?;
    }
    Settings::from_map(&map)
}

fn mode_name(m: ModeArg) -> String {
    match m {
        ModeArg::Mle => "\"mle\"".into(),
        ModeArg::Mcmc => "\"mcmc\"".into(),
    }
}

fn dispatch(cli: &Cli, s: &Settings) -> Result<i32> {
    let out = &cli.out;
    match &cli.command {
        Command::Validate(d) => {
            let data = load_dataset(&d.paths, d.covariates.as_deref(), TerminalRule::Optional)?;
            let resolved = data.paths().iter().filter(|p| p.is_resolved()).count();
            println!(
                "ok: {} paths, horizon {}, {} covariates, {resolved} resolved",
                data.len(),
                data.horizon(),
                data.covariate_names().len()
            );
            Ok(EXIT_OK)
        }
        Command::Fit { data: d, model, .. } => {
            let data = load_dataset(&d.paths, d.covariates.as_deref(), TerminalRule::Required)?;
            let fitted = fit_model(*model, &data, &s.fit)?;
            ensure_dir(out)?;
            let file = out.join("fit.json");
            write_json(&file, &fitted)?;
            let mut code = EXIT_OK;
            if let FittedModel::Glim { fit, .. } = &fitted {
                println!("point: rho={} beta={:?}", fit.point.rho, fit.point.beta);
                println!("log-likelihood: {}", fit.diagnostics.log_likelihood);
                match fit.diagnostics.status {
                    FitStatus::Converged => {}
                    FitStatus::Warning => eprintln!("warning: convergence checks not fully met"),
                    FitStatus::NotConverged => {
                        eprintln!("error: fit did not converge (split R-hat >= 1.2); result written anyway");
                        code = EXIT_NOT_CONVERGED;
                    }
                }
            }
            println!("wrote {}", file.display());
            Ok(code)
        }
        Command::Simulate {
            data: d,
            fit,
            model,
            samples,
        } => {
            let observed = load_dataset(&d.paths, d.covariates.as_deref(), TerminalRule::Optional)?;
            let text = fs::read_to_string(fit).map_err(|e| GlimError::io(fit, e))?;
            let fitted: FittedModel = serde_json::from_str(&text)
                .map_err(|e| GlimError::Input(format!("{}: {e}", fit.display())))?;
            if let Some(m) = model {
                if *m != fitted.kind() {
                    return Err(GlimError::Input(format!(
                        "--model {} does not match the {} fit in {}",
                        m.name(),
                        fitted.kind().name(),
                        fit.display()
                    )));
                }
            }
            let m = samples.unwrap_or(s.samples);
            let ens = simulate_ensemble(&fitted, &observed, m, s.seed)?;
            ensure_dir(out)?;
            let file = out.join("ensemble.csv");
            write_ensemble(&file, &ens)?;
            println!("wrote {} ({} paths x {m} samples)", file.display(), ens.len());
            Ok(EXIT_OK)
        }
        Command::Evaluate { paths, ensemble } => {
            let observed = load_dataset(paths, None, TerminalRule::Optional)?;
            let ens = read_ensemble(ensemble)?;
            let checkpoints = s
                .checkpoints
                .clone()
                .unwrap_or_else(|| default_checkpoints(observed.horizon()));
            let report = evaluate(&ens, &observed, &checkpoints, &s.alphas)?;
            ensure_dir(out)?;
            write_json(&out.join("metrics.json"), &report)?;
            write_rows(&out.join("metrics.csv"), ["metric", "t", "alpha", "value"], &report.csv_rows())?;
            println!("mean calibration MSE: {}", report.mean_calibration_mse.aggregate);
            println!("volatility MSE: {}", report.volatility_mse);
            for c in &report.ci_coverage {
                println!("coverage error t={} alpha={}: {:+.4}", c.t, c.alpha, c.error);
            }
            Ok(EXIT_OK)
        }
        Command::Synth => {
            let data = generate_dataset(&s.synth)?;
            ensure_dir(out)?;
            write_paths(&out.join("paths.csv"), &data)?;
            write_covariates(&out.join("covariates.csv"), &data)?;
            println!("wrote {} paths of horizon {} to {}", data.len(), data.horizon(), out.display());
            Ok(EXIT_OK)
        }
        Command::Recover { .. } => {
            let report = run_recovery(&s.recover)?;
            ensure_dir(out)?;
            write_rows(&out.join("recovery.csv"), RecoveryReport::CSV_HEADER, &report.csv_rows())?;
            write_json(&out.join("recovery.json"), &report)?;
            println!("beta_true rho_true beta_hat rho_hat n_ok");
            for c in &report.cells {
                println!(
                    "{:>9} {:>8} {:>8.3} {:>7.3} {:>4}",
                    c.beta_true, c.rho_true, c.beta_hat_mean, c.rho_hat_mean, c.n_ok
                );
            }
            Ok(EXIT_OK)
        }
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let (args, overrides) = split_overrides(args.into_iter().map(Into::into).collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut extra: Vec<(&str, String)> = Vec::new();
    match &cli.command {
        Command::Fit { mode: Some(m), .. } => extra.push(("fit.mode", mode_name(*m))),
        Command::Recover { full, mode } => {
            if *full {
                extra.push(("recover.full", "true".into()));
            }
            if let Some(m) = mode {
                extra.push(("recover.mode", mode_name(*m)));
            }
        }
        _ => {}
    }
    let result = settings(&cli, &overrides, &extra).and_then(|s| {
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(n) = s.threads {
            pool = pool.num_threads(n);
        }
        let pool = pool
            .build()
            .map_err(|e| GlimError::Config(format!("cannot start worker pool: {e}")))?;
        pool.install(|| dispatch(&cli, &s))
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, ov) = split_overrides(os(&[
            "glim",
            "fit",
            "--paths",
            "a.csv",
            "--fit.restarts",
            "3",
            "--synth.rho=-0.4",
            "--covariance.rho_free",
            "false",
        ]));
        assert_eq!(rest, os(&["glim", "fit", "--paths", "a.csv"]));
        assert_eq!(
            ov,
            vec![
                ("fit.restarts".to_string(), "3".to_string()),
                ("synth.rho".to_string(), "-0.4".to_string()),
                ("covariance.rho_free".to_string(), "false".to_string()),
            ]
        );
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["glim", "frobnicate"]), EXIT_INPUT);
        assert_eq!(run(["glim", "fit"]), EXIT_INPUT);
        assert_eq!(run(["glim", "--help"]), EXIT_OK);
    }

    #[test]
    fn unknown_override_exits_two() {
        assert_eq!(run(["glim", "synth", "--synth.nope", "1"]), EXIT_INPUT);
    }

    #[test]
    fn missing_input_exits_two() {
        assert_eq!(run(["glim", "validate", "--paths", "/nonexistent/paths.csv"]), EXIT_INPUT);
    }
}
