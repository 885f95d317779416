//! Acceptance checks. Run with `cargo test --test acceptance`; prints one
//! line per criterion and exits non-zero if any gated criterion fails.

use std::sync::Arc;
use std::time::Instant;

use glim::baselines::{lr_fit, mmfe_fit};
use glim::covariance::{build_sigma, CovarianceSpec};
use glim::fitted::{simulate_ensemble, FittedModel};
use glim::gaussian::{log_std_cdf, std_cdf, std_pdf, CovMatrix};
use glim::glim::{diagonal_log_density, ConditioningCache, GlimPathModel};
use glim::inference::{Diagnostics, FitMode, FitResult, FitStatus};
use glim::metrics::{default_checkpoints, evaluate, DEFAULT_ALPHAS};
use glim::path::{PathDataset, ProbabilityPath};
use glim::seed::indexed_rng;
use glim::synth::{generate_dataset, run_recovery, RecoveryConfig, RecoveryReport, SynthSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

const SEED: u64 = 20_240_601;

// Tolerances.
const MARTINGALE_SE: f64 = 3.0;
const VOLATILITY_SE: f64 = 3.0;
const QUADRATURE_TOL: f64 = 1e-6;
const SHORTCUT_TOL: f64 = 1e-10;
const ROUND_TRIP_TOL: f64 = 1e-8;
const RECOVERY_TOL: f64 = 0.15;
const COVERAGE_TOL: f64 = 0.02;
const CALIBRATION_FLOOR_RATIO: f64 = 2.0;
const MMFE_REL_TOL: f64 = 0.05;
const LR_TOL: f64 = 1e-10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

#[derive(Debug, Clone, Copy)]
struct RandomModel {
    horizon: usize,
    rho: f64,
    beta: f64,
    x: f64,
    y0: f64,
}

impl RandomModel {
    fn draw(rng: &mut ChaCha8Rng, max_horizon: usize, diagonal: bool) -> Self {
        RandomModel {
            horizon: rng.random_range(2..=max_horizon),
            rho: if diagonal { 0.0 } else { rng.random_range(-0.8..0.8) },
            beta: rng.random_range(-0.5..0.5),
            x: rng.random_range(-1.0..1.0),
            y0: rng.random_range(0.05..0.95),
        }
    }

    fn sigma(&self) -> CovMatrix {
        let spec = CovarianceSpec::exp_linear(self.rho, vec![self.beta]).unwrap();
        build_sigma(&spec, &[self.x], self.horizon).unwrap()
    }

    fn model(&self, clamp: f64) -> GlimPathModel {
        GlimPathModel::for_start(Arc::new(ConditioningCache::new(self.sigma()).unwrap()), self.y0, clamp).unwrap()
    }
}

struct PathMoments {
    n: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    q_sum: f64,
    q_sum_sq: f64,
}

impl PathMoments {
    fn new(horizon: usize) -> Self {
        PathMoments {
            n: 0.0,
            sum: vec![0.0; horizon + 1],
            sum_sq: vec![0.0; horizon + 1],
            q_sum: 0.0,
            q_sum_sq: 0.0,
        }
    }

    fn add(&mut self, y: &[f64]) {
        self.n += 1.0;
        for (t, v) in y.iter().enumerate() {
            self.sum[t] += v;
            self.sum_sq[t] += v * v;
        }
        let q: f64 = y.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
        self.q_sum += q;
        self.q_sum_sq += q * q;
    }

    fn merge(mut self, o: PathMoments) -> Self {
        self.n += o.n;
        for t in 0..self.sum.len() {
            self.sum[t] += o.sum[t];
            self.sum_sq[t] += o.sum_sq[t];
        }
        self.q_sum += o.q_sum;
        self.q_sum_sq += o.q_sum_sq;
        self
    }

    fn mean_se(sum: f64, sum_sq: f64, n: f64) -> (f64, f64) {
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
        (mean, (var.max(0.0) / n).sqrt())
    }
}

fn simulate_moments(model: &GlimPathModel, stream: &str, index: usize, paths: usize) -> PathMoments {
    const CHUNK: usize = 5_000;
    let chunks = paths / CHUNK;
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = indexed_rng(SEED, stream, index * chunks + c);
            let mut acc = PathMoments::new(model.horizon());
            for _ in 0..CHUNK {
                acc.add(&model.sample_path(&mut rng));
            }
            acc
        })
        .reduce(|| PathMoments::new(model.horizon()), PathMoments::merge)
}

fn worst_drift(m: &PathMoments, y0: f64) -> f64 {
    (1..m.sum.len())
        .map(|t| {
            let (mean, se) = PathMoments::mean_se(m.sum[t], m.sum_sq[t], m.n);
            (mean - y0).abs() / se
        })
        .fold(0.0, f64::max)
}

/// Criteria 1 and 2 share one Monte Carlo run per model. The third result
/// reruns any model that breached the drift limit on ten times the paths
/// from a fresh stream.
fn martingale_and_volatility() -> (Outcome, Outcome, Outcome) {
    const MODELS: usize = 20;
    const PATHS: usize = 100_000;
    let mut worst_mart: f64 = 0.0;
    let mut worst_vol: f64 = 0.0;
    let mut flagged = Vec::new();
    for i in 0..MODELS {
        let spec = RandomModel::draw(&mut indexed_rng(SEED, "acceptance-mc-model", i), 10, false);
        let model = spec.model(1e-9);
        let m = simulate_moments(&model, "acceptance-mc-paths", i, PATHS);
        let drift = worst_drift(&m, spec.y0);
        if drift > MARTINGALE_SE {
            flagged.push((i, spec, model, drift));
        }
        worst_mart = worst_mart.max(drift);
        let (q, se) = PathMoments::mean_se(m.q_sum, m.q_sum_sq, m.n);
        worst_vol = worst_vol.max((q - spec.y0 * (1.0 - spec.y0)).abs() / se);
    }
    let follow_up = if flagged.is_empty() {
        outcome(true, "no model breached the drift limit".into())
    } else {
        let parts: Vec<String> = flagged
            .iter()
            .map(|(i, spec, model, drift)| {
                let again = worst_drift(&simulate_moments(model, "acceptance-mc-recheck", *i, 10 * PATHS), spec.y0);
                format!("model {i} (T = {}): {drift:.2} SE at 10^5 paths, {again:.2} SE at 10^6", spec.horizon)
            })
            .collect();
        outcome(true, parts.join("; "))
    };
    (
        outcome(
            worst_mart <= MARTINGALE_SE,
            format!(
                "{MODELS} models x {PATHS} paths, worst |mean y_t - y_0| = {worst_mart:.2} SE (limit {MARTINGALE_SE}); {} model(s) over",
                flagged.len()
            ),
        ),
        outcome(
            worst_vol <= VOLATILITY_SE,
            format!("worst |mean Q_T - y_0(1-y_0)| = {worst_vol:.2} SE (limit {VOLATILITY_SE})"),
        ),
        follow_up,
    )
}

/// Random SPD matrix `A A' + 0.5 I` with `A_ij ~ N(0, 0.25)`.
fn random_spd(dim: usize, rng: &mut ChaCha8Rng) -> CovMatrix {
    let a: Vec<f64> = (0..dim * dim).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut s = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            s[i * dim + j] = (0..dim).map(|k| a[i * dim + k] * a[j * dim + k]).sum::<f64>();
        }
        s[i * dim + i] += 0.5;
    }
    CovMatrix::new(dim, s).unwrap()
}

/// Probits beyond this cannot round-trip through an f64 probability.
const REPRESENTABLE: f64 = 7.5;

/// `log p(y_1..y_{T-1}, y_T)` in probit coordinates: plus `sum log phi(u_t)`
/// for the change of variables. Inside the representable range this goes
/// through `log_density` on the probability path itself.
fn probit_log_mass(model: &GlimPathModel, y0: f64, u: &[f64], outcome: bool) -> f64 {
    let jac: f64 = u.iter().map(|&v| std_pdf(v).ln()).sum();
    if u.iter().all(|v| v.abs() <= REPRESENTABLE) {
        let mut y = vec![y0];
        y.extend(u.iter().map(|&v| std_cdf(v)));
        y.push(if outcome { 1.0 } else { 0.0 });
        let p = ProbabilityPath::new("q", y, vec![]).unwrap();
        return model.log_density(&p).unwrap() + jac;
    }
    let last = *u.last().unwrap();
    let end = log_std_cdf(if outcome { last } else { -last });
    model.interior_log_density(u).unwrap() + end + jac
}

/// Total mass over the interior and both outcomes by the trapezoid rule. Each
/// `u_t` runs over `mu_t + sd_t v` for `v` in `[-L, L]`, with the step
/// moments read from the model, so the grid follows the mass wherever it
/// sits.
fn quadrature_mass(model: &GlimPathModel, y0: f64, points: usize) -> (f64, f64) {
    const L: f64 = 9.0;
    let h = 2.0 * L / (points - 1) as f64;
    let nodes: Vec<(f64, f64)> = (0..points)
        .map(|i| (-L + i as f64 * h, if i == 0 || i == points - 1 { 0.5 * h } else { h }))
        .collect();
    // Mass at one interior point, split into (all, outside the representable range).
    let at = |u: &[f64], scale: f64| -> (f64, f64) {
        let m: f64 = [false, true].iter().map(|&o| probit_log_mass(model, y0, u, o).exp()).sum::<f64>() * scale;
        let tail = if u.iter().any(|v| v.abs() > REPRESENTABLE) { m } else { 0.0 };
        (m, tail)
    };
    let add = |a: (f64, f64), b: (f64, f64)| (a.0 + b.0, a.1 + b.1);
    let (mu1, sd1) = model.step_params(&[], 1).unwrap();
    match model.horizon() {
        2 => nodes
            .par_iter()
            .map(|&(v, w)| at(&[mu1 + sd1 * v], w * sd1))
            .reduce(|| (0.0, 0.0), add),
        3 => nodes
            .par_iter()
            .map(|&(v1, w1)| {
                let u1 = mu1 + sd1 * v1;
                let z1 = model.latents_from_probits(&[u1]).unwrap().into_inner();
                let (mu2, sd2) = model.step_params(&z1, 2).unwrap();
                nodes
                    .iter()
                    .map(|&(v2, w2)| at(&[u1, mu2 + sd2 * v2], w1 * sd1 * w2 * sd2))
                    .fold((0.0, 0.0), add)
            })
            .reduce(|| (0.0, 0.0), add),
        h => panic!("quadrature only for T = 2, 3, got {h}"),
    }
}

fn density_normalization() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut worst_tail: f64 = 0.0;
    let mut count = 0;
    for horizon in [2usize, 3] {
        let points = if horizon == 2 { 10_000 } else { 1_001 };
        for k in 0..10 {
            let mut rng = indexed_rng(SEED, "acceptance-quadrature", horizon * 100 + k);
            let sigma = if k < 5 {
                let d: Vec<f64> = (0..horizon).map(|_| rng.random_range(0.3..2.0)).collect();
                CovMatrix::diagonal(&d).unwrap()
            } else {
                random_spd(horizon, &mut rng)
            };
            let y0 = rng.random_range(0.2..0.8);
            let model = GlimPathModel::for_start(Arc::new(ConditioningCache::new(sigma).unwrap()), y0, 1e-15).unwrap();
            let (mass, tail) = quadrature_mass(&model, y0, points);
            worst = worst.max((mass - 1.0).abs());
            worst_tail = worst_tail.max(tail);
            count += 1;
        }
    }
    outcome(
        worst <= QUADRATURE_TOL,
        format!("{count} models (T = 2, 3; diagonal and dense), worst |mass - 1| = {worst:.2e} (limit {QUADRATURE_TOL:e}); largest mass past |probit| {REPRESENTABLE} = {worst_tail:.1e}"),
    )
}

fn shortcut_agreement() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let mut rng = indexed_rng(SEED, "acceptance-diagonal", i);
        let spec = RandomModel::draw(&mut rng, 10, true);
        let model = spec.model(1e-9);
        let sigma2: Vec<f64> = (0..spec.horizon).map(|t| model.cache().sigma().get(t, t)).collect();
        // One path from the model and one with uniform interior values.
        let sampled = model.sample_path(&mut rng);
        let mut uniform = vec![spec.y0];
        uniform.extend((1..spec.horizon).map(|_| rng.random_range(0.001..0.999)));
        uniform.push(if rng.random::<bool>() { 1.0 } else { 0.0 });
        for y in [sampled, uniform] {
            let path = ProbabilityPath::new("d", y.clone(), vec![spec.x]).unwrap();
            let general = model.log_density(&path).unwrap();
            let shortcut = diagonal_log_density(&sigma2, &y, 1e-9).unwrap();
            worst = worst.max((general - shortcut).abs());
        }
    }
    outcome(
        worst <= SHORTCUT_TOL,
        format!("100 diagonal models x 2 paths, worst |difference| = {worst:.2e} (limit {SHORTCUT_TOL:e})"),
    )
}

fn latent_round_trip() -> Outcome {
    const CLAMP: f64 = 1e-9;
    let mut worst: f64 = 0.0;
    let mut skipped = 0usize;
    let mut missing = 0usize;
    for i in 0..1000 {
        let mut rng = indexed_rng(SEED, "acceptance-round-trip", i);
        let spec = RandomModel::draw(&mut rng, 10, false);
        let model = spec.model(CLAMP);
        // Forecasts past the clamp are moved by design, so draw until the
        // interior stays inside it.
        let mut done = false;
        for _ in 0..1000 {
            let z = model.sample_latents(&mut rng);
            let y = model.path_from_latents(&z).unwrap();
            let interior = &y[1..spec.horizon];
            if interior.iter().any(|&v| v < CLAMP || v > 1.0 - CLAMP) {
                skipped += 1;
                continue;
            }
            let back = model.recover_latents(interior).unwrap();
            for (a, b) in back.iter().zip(&z) {
                worst = worst.max((a - b).abs());
            }
            done = true;
            break;
        }
        missing += usize::from(!done);
    }
    outcome(
        worst <= ROUND_TRIP_TOL && missing == 0,
        format!(
            "1000 models, worst |z_hat - z| = {worst:.2e} (limit {ROUND_TRIP_TOL:e}); {skipped} draws past the clamp redrawn"
        ),
    )
}

fn recovery_summary(report: &RecoveryReport) -> (bool, String) {
    let mut worst: f64 = 0.0;
    let mut worst_cell = (0.0, 0.0);
    let mut ok = true;
    for c in &report.cells {
        let err = (c.beta_hat_mean - c.beta_true).abs().max((c.rho_hat_mean - c.rho_true).abs());
        ok &= err <= RECOVERY_TOL && c.n_ok == report.replicates;
        if err > worst {
            worst = err;
            worst_cell = (c.beta_true, c.rho_true);
        }
    }
    (
        ok,
        format!(
            "{} cells x {} datasets of {} paths, worst mean error {worst:.3} at (beta, rho) = ({}, {}) (limit {RECOVERY_TOL})",
            report.cells.len(),
            report.replicates,
            report.paths_per_set,
            worst_cell.0,
            worst_cell.1
        ),
    )
}

fn parameter_recovery(mode: FitMode) -> Outcome {
    let mut config = RecoveryConfig {
        seed: SEED,
        ..RecoveryConfig::default()
    };
    config.fit.mode = mode;
    let report = run_recovery(&config).unwrap();
    let (pass, detail) = recovery_summary(&report);
    outcome(pass, detail)
}

fn metrics_self_consistency() -> Outcome {
    let truth = SynthSpec {
        horizon: 10,
        y0: 0.75,
        beta: vec![0.2],
        rho: 0.3,
        n_paths: 10_000,
        seed: SEED,
        ..SynthSpec::default()
    };
    let observed = generate_dataset(&truth).unwrap();
    let model = FittedModel::Glim {
        horizon: truth.horizon,
        covariate_names: truth.covariate_names(),
        clamp: 1e-9,
        fit: FitResult {
            point: truth.covariance().unwrap(),
            draws: None,
            diagnostics: Diagnostics {
                mode: FitMode::Mle,
                status: FitStatus::Converged,
                n_paths: 0,
                parameters: vec![],
                log_likelihood: 0.0,
                restarts: vec![],
                acceptance: vec![],
                rhat: vec![],
            },
        },
    };
    let ens = simulate_ensemble(&model, &observed, 100, SEED + 1).unwrap();
    let report = evaluate(&ens, &observed, &default_checkpoints(truth.horizon), &DEFAULT_ALPHAS).unwrap();
    let worst_cov = report.ci_coverage.iter().map(|c| c.error.abs()).fold(0.0, f64::max);
    let ratio = report.mean_calibration_mse.aggregate / report.calibration_noise_floor;
    outcome(
        worst_cov <= COVERAGE_TOL && ratio <= CALIBRATION_FLOOR_RATIO,
        format!(
            "10^4 paths x M=100, worst |coverage error| = {worst_cov:.4} (limit {COVERAGE_TOL}); calibration MSE / floor = {ratio:.3} (limit {CALIBRATION_FLOOR_RATIO})"
        ),
    )
}

/// Lower Cholesky factor of a small dense matrix.
fn cholesky(a: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            l[i * n + j] = if i == j { s.sqrt() } else { s / l[j * n + j] };
        }
    }
    l
}

fn baseline_sanity() -> Outcome {
    // MMFE: increments ~ N(0, C), C = D R D with R_ij = 0.6^|i-j|.
    let h = 5;
    let sd = [0.02, 0.015, 0.025, 0.01, 0.03];
    let mut c = vec![0.0; h * h];
    for i in 0..h {
        for j in 0..h {
            c[i * h + j] = sd[i] * sd[j] * 0.6f64.powi((i as i32 - j as i32).abs());
        }
    }
    let l = cholesky(&c, h);
    let mut rng = indexed_rng(SEED, "acceptance-mmfe", 0);
    let paths: Vec<ProbabilityPath> = (0..10_000)
        .map(|k| {
            let e: Vec<f64> = (0..h).map(|_| rng.sample(StandardNormal)).collect();
            let mut y = vec![0.5];
            for i in 0..h {
                let step: f64 = (0..=i).map(|j| l[i * h + j] * e[j]).sum();
                y.push(y[i] + step);
            }
            ProbabilityPath::unresolved(format!("m{k}"), y, vec![]).unwrap()
        })
        .collect();
    let fitted = mmfe_fit(&PathDataset::from_paths(vec![], paths).unwrap()).unwrap();
    let mut mmfe_worst: f64 = 0.0;
    let mut plain_worst: f64 = 0.0;
    for i in 0..h {
        for j in 0..h {
            let err = (fitted.cov_entry(i, j) - c[i * h + j]).abs();
            mmfe_worst = mmfe_worst.max(err / (c[i * h + i] * c[j * h + j]).sqrt());
            plain_worst = plain_worst.max(err / c[i * h + j].abs());
        }
    }

    // LR: y_t = a_t + b_t x + c_t y0 exactly.
    let horizon = 4;
    let planted = [[0.1, 0.2, 0.6], [0.05, -0.1, 0.8], [0.2, 0.15, 0.5]];
    let mut rng = indexed_rng(SEED, "acceptance-lr", 0);
    let paths: Vec<ProbabilityPath> = (0..50)
        .map(|k| {
            let x: f64 = rng.random_range(0.0..1.0);
            let y0: f64 = rng.random_range(0.3..0.7);
            let mut y = vec![y0];
            y.extend(planted.iter().map(|p| p[0] + p[1] * x + p[2] * y0));
            y.push(if y[horizon - 1] > 0.5 { 1.0 } else { 0.0 });
            ProbabilityPath::new(format!("l{k}"), y, vec![x]).unwrap()
        })
        .collect();
    let lr = lr_fit(&PathDataset::from_paths(vec!["x".into()], paths).unwrap()).unwrap();
    let lr_worst = lr
        .coefficients
        .iter()
        .zip(&planted)
        .flat_map(|(got, want)| got.iter().zip(want).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    outcome(
        mmfe_worst <= MMFE_REL_TOL && lr_worst <= LR_TOL,
        format!(
            "MMFE 10^4 paths: worst |C_hat - C| / sqrt(C_ii C_jj) = {mmfe_worst:.4} (limit {MMFE_REL_TOL}; plain relative {plain_worst:.4}); LR worst coefficient error = {lr_worst:.1e} (limit {LR_TOL:e})"
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut failed = 0;
    let mut report = |id: &str, name: &str, gated: bool, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let tag = match (gated, o.pass) {
            (true, true) => "PASS",
            (true, false) => "FAIL",
            (false, true) => "INFO pass",
            (false, false) => "INFO fail",
        };
        if gated && !o.pass {
            failed += 1;
        }
        println!("{tag} {id} {name}: {} [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
    };

    let t = Instant::now();
    let (mart, vol, recheck) = martingale_and_volatility();
    let shared = t.elapsed().as_secs_f64();
    let mut mart = Some(mart);
    let mut vol = Some(vol);
    let mut recheck = Some(recheck);
    report("1", "martingale", true, &mut || mart.take().unwrap());
    report("1b", "martingale recheck of breaching models", false, &mut || recheck.take().unwrap());
    report("2", "volatility identity", true, &mut || vol.take().unwrap());
    println!("     (criteria 1, 1b, 2 share one simulation: {shared:.1}s)");
    report("3", "density normalization", true, &mut density_normalization);
    report("4", "diagonal shortcut", true, &mut shortcut_agreement);
    report("5", "latent round-trip", true, &mut latent_round_trip);
    report("6", "parameter recovery (maximum likelihood)", true, &mut || parameter_recovery(FitMode::Mle));
    report("6b", "parameter recovery (posterior means)", false, &mut || parameter_recovery(FitMode::Mcmc));
    report("7", "metrics self-consistency", true, &mut metrics_self_consistency);
    report("8", "baseline sanity", true, &mut baseline_sanity);
    println!("INFO 9 real-data figures: not reproduced; needs external forecast datasets");
    println!("acceptance: {failed} gated criteria failed [{:.1}s total]", start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
