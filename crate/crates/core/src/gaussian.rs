//! Scalar normal functions and dense Gaussian conditioning.
//!
//! Matrices are stored row-major. Conditioning and sampling go through a
//! single Cholesky factor held by [`CovMatrix`].

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GlimError, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Pivots of the Cholesky factorization below this fraction of the largest
/// diagonal entry are rejected.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Standard normal CDF without input checks. NaN propagates.
#[inline]
pub fn std_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn std_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// `ln Phi(x)`, accurate far into the lower tail.
pub fn log_std_cdf(x: f64) -> f64 {
    if x > -30.0 {
        return std_cdf(x).ln();
    }
    let r = 1.0 / (x * x);
    -0.5 * x * x - (-x).ln() - LN_SQRT_2PI + (1.0 - r + 3.0 * r * r - 15.0 * r * r * r).ln()
}

pub fn normal_cdf(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(GlimError::InvalidArgument(format!(
            "normal_cdf requires a finite argument, got {x}"
        )));
    }
    Ok(std_cdf(x))
}

pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(GlimError::Domain(format!(
            "normal_quantile requires p in (0, 1), got {p}"
        )));
    }
    Ok(std_quantile(p))
}

/// Inverse standard normal CDF for `p` in (0, 1), unchecked.
///
/// Wichura's AS241 rational approximation followed by one Newton step on
/// [`std_cdf`]. The upper half is mirrored from the lower half, which keeps
/// the function exactly odd about 0.5 (`1 - p` is exact for `p >= 0.5`).
pub fn std_quantile(p: f64) -> f64 {
    if p > 0.5 {
        return -std_quantile(1.0 - p);
    }
    let x = as241(p);
    let pdf = std_pdf(x);
    if pdf > 0.0 {
        x - (std_cdf(x) - p) / pdf
    } else {
        x
    }
}

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn as241(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_608,
        1.331_416_678_917_843_774_5e2,
        1.971_590_950_306_551_442_7e3,
        1.373_169_376_550_946_112_5e4,
        4.592_195_393_154_987_145_7e4,
        6.726_577_092_700_870_085_3e4,
        3.343_057_558_358_812_810_5e4,
        2.509_080_928_730_122_672_7e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.231_333_070_160_091_125_2e1,
        6.871_870_074_920_579_083e2,
        5.394_196_021_424_751_107_7e3,
        2.121_379_430_158_659_586_7e4,
        3.930_789_580_009_271_061e4,
        2.872_908_573_572_194_267_4e4,
        5.226_495_278_852_854_561e3,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_34,
        4.630_337_846_156_545_295_9,
        5.769_497_221_460_691_405_5,
        3.647_848_324_763_204_605_04,
        1.270_458_252_452_368_382_58,
        2.417_807_251_774_506_117_7e-1,
        2.272_384_498_926_918_458_33e-2,
        7.745_450_142_783_414_076_4e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_87,
        1.676_384_830_183_803_849_4,
        6.897_673_349_851_000_045_5e-1,
        1.481_039_764_274_800_745_9e-1,
        1.519_866_656_361_645_719_66e-2,
        5.475_938_084_995_344_946e-4,
        1.050_750_071_644_416_843_24e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_2,
        5.463_784_911_164_114_369_9,
        1.784_826_539_917_291_335_8,
        2.965_605_718_285_048_912_3e-1,
        2.653_218_952_657_612_309_3e-2,
        1.242_660_947_388_078_438_6e-3,
        2.711_555_568_743_487_578_15e-5,
        2.010_334_399_292_288_132_65e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.998_322_065_558_879_376_9e-1,
        1.369_298_809_227_358_053_1e-1,
        1.487_536_129_085_061_485_25e-2,
        7.868_691_311_456_132_591e-4,
        1.846_318_317_510_054_681_8e-5,
        1.421_511_758_316_445_888_7e-7,
        2.044_263_103_389_939_785_64e-15,
    ];

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Compensated (Kahan-Babuska) sum.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Lower-triangular Cholesky factor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factorizes a symmetric matrix, reading only the lower triangle.
    pub fn decompose(dim: usize, a: &[f64]) -> Result<Self> {
        if a.len() != dim * dim {
            return Err(GlimError::InvalidArgument(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                a.len()
            )));
        }
        let scale = (0..dim)
            .map(|i| a[i * dim + i].abs())
            .fold(0.0_f64, f64::max);
        let threshold = PIVOT_TOLERANCE * scale.max(f64::MIN_POSITIVE);
        let mut l = vec![0.0; dim * dim];
        for j in 0..dim {
            let mut d = a[j * dim + j];
            for k in 0..j {
                d -= l[j * dim + k] * l[j * dim + k];
            }
            if !(d >= threshold) || !d.is_finite() {
                return Err(GlimError::Numerical(format!(
                    "matrix is not positive definite: pivot {} is {d:.3e} (threshold {threshold:.3e}, \
                     largest diagonal {scale:.3e}, condition estimate > {:.3e})",
                    j + 1,
                    if d > 0.0 { scale / d } else { f64::INFINITY }
                )));
            }
            let ljj = d.sqrt();
            l[j * dim + j] = ljj;
            for i in (j + 1)..dim {
                let mut s = a[i * dim + j];
                for k in 0..j {
                    s -= l[i * dim + k] * l[j * dim + k];
                }
                l[i * dim + j] = s / ljj;
            }
        }
        Ok(Cholesky { dim, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    /// Computes `L * v`.
    pub fn mul_lower(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim;
        (0..n)
            .map(|i| (0..=i).map(|k| self.lower[i * n + k] * v[k]).sum())
            .collect()
    }

    /// Solves `A x = b` through the factor's leading `n x n` block, which is
    /// the Cholesky factor of the leading principal submatrix of `A`.
    pub fn solve_leading(&self, n: usize, b: &[f64]) -> Vec<f64> {
        debug_assert!(n <= self.dim && b.len() == n);
        let d = self.dim;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.lower[i * d + k] * y[k];
            }
            y[i] = s / self.lower[i * d + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lower[k * d + i] * y[k];
            }
            y[i] = s / self.lower[i * d + i];
        }
        y
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_leading(self.dim, b)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim)
            .map(|i| self.lower[i * self.dim + i].ln())
            .sum::<f64>()
    }
}

/// Symmetric positive-definite matrix with its Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub struct CovMatrix {
    dim: usize,
    entries: Vec<f64>,
    chol: Cholesky,
}

impl CovMatrix {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(GlimError::InvalidArgument(
                "covariance matrix must have positive dimension".into(),
            ));
        }
        if entries.len() != dim * dim {
            return Err(GlimError::InvalidArgument(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        if let Some(bad) = entries.iter().position(|v| !v.is_finite()) {
            return Err(GlimError::InvalidArgument(format!(
                "covariance entry ({}, {}) is not finite",
                bad / dim + 1,
                bad % dim + 1
            )));
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let (a, b) = (entries[i * dim + j], entries[j * dim + i]);
                if (a - b).abs() > SYMMETRY_TOLERANCE * a.abs().max(b.abs()) {
                    return Err(GlimError::InvalidArgument(format!(
                        "covariance matrix is not symmetric at ({}, {}): {a} vs {b}",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        let chol = Cholesky::decompose(dim, &entries)?;
        Ok(CovMatrix { dim, entries, chol })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(GlimError::InvalidArgument(
                "covariance rows must form a square matrix".into(),
            ));
        }
        CovMatrix::new(dim, rows.concat())
    }

    pub fn identity(dim: usize) -> Self {
        let mut e = vec![0.0; dim * dim];
        for i in 0..dim {
            e[i * dim + i] = 1.0;
        }
        CovMatrix::new(dim, e).expect("identity is positive definite")
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        let dim = values.len();
        let mut e = vec![0.0; dim * dim];
        for (i, v) in values.iter().enumerate() {
            e[i * dim + i] = *v;
        }
        CovMatrix::new(dim, e)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.chol
    }

    /// Compensated sum of every entry.
    pub fn total_sum(&self) -> f64 {
        kahan_sum(self.entries.iter().copied())
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.dim).all(|i| (0..self.dim).all(|j| i == j || self.get(i, j) == 0.0))
    }
}

/// Distribution of the trailing block given the leading coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalGaussian {
    pub mean: Vec<f64>,
    pub cov: CovMatrix,
}

/// Regression of the trailing `dim - t` coordinates on the leading `t`.
#[derive(Clone, Debug)]
pub(crate) struct Regression {
    /// `Sigma21 * inv(Sigma11)`, `(dim - t) x t`, row-major.
    pub gain: Vec<f64>,
    /// Schur complement `Sigma22 - Sigma21 inv(Sigma11) Sigma12`, row-major.
    pub cov: Vec<f64>,
}

pub(crate) fn regress_trailing(sigma: &CovMatrix, t: usize) -> Regression {
    let d = sigma.dim();
    let rest = d - t;
    let chol = sigma.cholesky();
    let mut gain = vec![0.0; rest * t];
    for r in 0..rest {
        let row: Vec<f64> = (0..t).map(|c| sigma.get(t + r, c)).collect();
        // Sigma11 is symmetric, so row r of the gain solves Sigma11 g = Sigma12[:, r].
        let g = chol.solve_leading(t, &row);
        gain[r * t..(r + 1) * t].copy_from_slice(&g);
    }
    let mut cov = vec![0.0; rest * rest];
    for i in 0..rest {
        for j in 0..=i {
            let proj: f64 = (0..t).map(|k| gain[i * t + k] * sigma.get(k, t + j)).sum();
            let v = sigma.get(t + i, t + j) - proj;
            cov[i * rest + j] = v;
            cov[j * rest + i] = v;
        }
    }
    Regression { gain, cov }
}

/// Conditions `N(0, sigma)` on its first `t` coordinates equal to `z`.
pub fn mvn_condition(sigma: &CovMatrix, t: usize, z: &[f64]) -> Result<ConditionalGaussian> {
    let d = sigma.dim();
    if t == 0 || t >= d {
        return Err(GlimError::InvalidArgument(format!(
            "conditioning count must satisfy 0 < t < {d}, got {t}"
        )));
    }
    if z.len() != t {
        return Err(GlimError::InvalidArgument(format!(
            "expected {t} conditioning values, got {}",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(GlimError::InvalidArgument(
            "conditioning values must be finite".into(),
        ));
    }
    let reg = regress_trailing(sigma, t);
    let mean = reg
        .gain
        .chunks(t)
        .map(|row| row.iter().zip(z).map(|(g, v)| g * v).sum())
        .collect();
    let cov = CovMatrix::new(d - t, reg.cov)?;
    Ok(ConditionalGaussian { mean, cov })
}

/// Draws one vector from `N(mean, sigma)`.
pub fn mvn_sample<R: Rng + ?Sized>(mean: &[f64], sigma: &CovMatrix, rng: &mut R) -> Result<Vec<f64>> {
    if mean.len() != sigma.dim() {
        return Err(GlimError::InvalidArgument(format!(
            "mean has length {} but covariance is {}x{}",
            mean.len(),
            sigma.dim(),
            sigma.dim()
        )));
    }
    Ok(sample_with_factor(mean, sigma.cholesky(), rng))
}

pub(crate) fn sample_with_factor<R: Rng + ?Sized>(mean: &[f64], chol: &Cholesky, rng: &mut R) -> Vec<f64> {
    let eps: Vec<f64> = (0..chol.dim()).map(|_| rng.sample(StandardNormal)).collect();
    chol.mul_lower(&eps)
        .into_iter()
        .zip(mean)
        .map(|(x, m)| x + m)
        .collect()
}
