//! C interface to the glim path model.
//!
//! Every function returns a [`GlimStatus`]; results are written through out
//! pointers. On failure `glim_last_error()` describes the most recent error
//! on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;
use std::sync::Arc;

use glim::covariance::{build_sigma, CovarianceSpec};
use glim::gaussian::{normal_cdf, normal_quantile, CovMatrix};
use glim::glim::{ConditioningCache, GlimPathModel};
use glim::path::ProbabilityPath;
use glim::seed::stream_rng;
use glim::GlimError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlimStatus {
    Ok = 0,
    InvalidArgument = 1,
    Domain = 2,
    Numerical = 3,
    Range = 4,
    Degenerate = 5,
    Validation = 6,
    Config = 7,
    Fit = 8,
    Input = 9,
    Io = 10,
    NullPointer = 11,
    Panic = 12,
}

/// Opaque path model handle. Create with `glim_model_new` or
/// `glim_model_new_exp_linear`, release with `glim_model_free`.
pub struct GlimModel {
    inner: GlimPathModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &GlimError) -> GlimStatus {
    match e {
        GlimError::InvalidArgument(_) => GlimStatus::InvalidArgument,
        GlimError::Domain(_) => GlimStatus::Domain,
        GlimError::Numerical(_) => GlimStatus::Numerical,
        GlimError::Range(_) => GlimStatus::Range,
        GlimError::Degenerate(_) => GlimStatus::Degenerate,
        GlimError::Validation(_) => GlimStatus::Validation,
        GlimError::Config(_) => GlimStatus::Config,
        GlimError::Fit(_) => GlimStatus::Fit,
        GlimError::Input(_) => GlimStatus::Input,
        GlimError::Io { .. } => GlimStatus::Io,
    }
}

enum Failure {
    Glim(GlimError),
    Null(&'static str),
}

impl From<GlimError> for Failure {
    fn from(e: GlimError) -> Self {
        Failure::Glim(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> GlimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GlimStatus::Ok,
        Ok(Err(Failure::Glim(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("null pointer passed as `{name}`"));
            GlimStatus::NullPointer
        }
        Err(_) => {
            set_error("internal panic".into());
            GlimStatus::Panic
        }
    }
}

unsafe fn input<'a>(p: *const f64, len: usize, name: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, name: &'static str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn model_ref<'a>(m: *const GlimModel) -> Result<&'a GlimPathModel, Failure> {
    m.as_ref().map(|m| &m.inner).ok_or(Failure::Null("model"))
}

fn want_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got != want {
        return Err(GlimError::InvalidArgument(format!("{what} must have length {want}, got {got}")).into());
    }
    Ok(())
}

fn emit(out: *mut *mut GlimModel, inner: GlimPathModel) {
    // SAFETY: callers check `out` before building the model.
    unsafe { *out = Box::into_raw(Box::new(GlimModel { inner })) };
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn glim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Standard normal CDF.
///
/// # Safety
/// `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn glim_normal_cdf(x: f64, out: *mut f64) -> GlimStatus {
    guard(|| {
        let out = output(out, 1, "out")?;
        out[0] = normal_cdf(x)?;
        Ok(())
    })
}

/// Standard normal quantile for `p` in (0, 1).
///
/// # Safety
/// `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn glim_normal_quantile(p: f64, out: *mut f64) -> GlimStatus {
    guard(|| {
        let out = output(out, 1, "out")?;
        out[0] = normal_quantile(p)?;
        Ok(())
    })
}

/// Model from a row-major `horizon x horizon` covariance and a start `y0`.
/// Probabilities are clamped to `[clamp, 1 - clamp]` before probits.
///
/// # Safety
/// `sigma` must hold `horizon * horizon` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn glim_model_new(
    sigma: *const f64,
    horizon: usize,
    y0: f64,
    clamp: f64,
    out: *mut *mut GlimModel,
) -> GlimStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let entries = input(sigma, horizon * horizon, "sigma")?.to_vec();
        let cache = ConditioningCache::new(CovMatrix::new(horizon, entries)?)?;
        emit(out, GlimPathModel::for_start(Arc::new(cache), y0, clamp)?);
        Ok(())
    })
}

/// Model with AR(1) correlation `rho` and variances `exp(beta.x (t - 1))`.
///
/// # Safety
/// `beta` and `x` must each hold `n_cov` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn glim_model_new_exp_linear(
    rho: f64,
    beta: *const f64,
    x: *const f64,
    n_cov: usize,
    horizon: usize,
    y0: f64,
    clamp: f64,
    out: *mut *mut GlimModel,
) -> GlimStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let spec = CovarianceSpec::exp_linear(rho, input(beta, n_cov, "beta")?.to_vec())?;
        let sigma = build_sigma(&spec, input(x, n_cov, "x")?, horizon)?;
        let cache = ConditioningCache::new(sigma)?;
        emit(out, GlimPathModel::for_start(Arc::new(cache), y0, clamp)?);
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from a constructor here and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn glim_model_free(model: *mut GlimModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the horizon `T`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn glim_model_horizon(model: *const GlimModel, out: *mut usize) -> GlimStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = m.horizon();
        Ok(())
    })
}

/// Writes the identified offset `gamma`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn glim_model_gamma(model: *const GlimModel, out: *mut f64) -> GlimStatus {
    guard(|| {
        let m = model_ref(model)?;
        output(out, 1, "out")?[0] = m.gamma();
        Ok(())
    })
}

/// Log-density of a resolved path `y_0..y_T` (`len = T + 1`, `y_T` in {0, 1}).
///
/// # Safety
/// `model` must be a live handle; `y` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn glim_model_log_density(
    model: *const GlimModel,
    y: *const f64,
    len: usize,
    out: *mut f64,
) -> GlimStatus {
    guard(|| {
        let m = model_ref(model)?;
        want_len(len, m.horizon() + 1, "path")?;
        let path = ProbabilityPath::new("ffi", input(y, len, "y")?.to_vec(), Vec::new())?;
        output(out, 1, "out")?[0] = m.log_density(&path)?;
        Ok(())
    })
}

/// Samples one path `y_0..y_T` into `out` (`len = T + 1`). Equal seeds give
/// equal paths.
///
/// # Safety
/// `model` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn glim_model_sample(model: *const GlimModel, seed: u64, out: *mut f64, len: usize) -> GlimStatus {
    guard(|| {
        let m = model_ref(model)?;
        want_len(len, m.horizon() + 1, "out")?;
        let out = output(out, len, "out")?;
        let mut rng = stream_rng(seed, "ffi-sample", "");
        out.copy_from_slice(&m.sample_path(&mut rng));
        Ok(())
    })
}

/// Recovers `z_1..z_{T-1}` from interior forecasts `y_1..y_{T-1}` (`len = T - 1`).
///
/// # Safety
/// `model` must be a live handle; `interior` and `out` must each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn glim_model_recover_latents(
    model: *const GlimModel,
    interior: *const f64,
    len: usize,
    out: *mut f64,
) -> GlimStatus {
    guard(|| {
        let m = model_ref(model)?;
        want_len(len, m.horizon() - 1, "interior")?;
        let z = m.recover_latents(input(interior, len, "interior")?)?;
        output(out, len, "out")?.copy_from_slice(&z);
        Ok(())
    })
}

/// Mean and standard deviation of `Phi^{-1}(Y_t)` given `z_1..z_{t-1}`
/// (`n_prefix = t - 1`).
///
/// # Safety
/// `model` must be a live handle; `z_prefix` must hold `n_prefix` doubles;
/// `mean` and `sd` must be writable.
#[no_mangle]
pub unsafe extern "C" fn glim_model_step_params(
    model: *const GlimModel,
    z_prefix: *const f64,
    n_prefix: usize,
    mean: *mut f64,
    sd: *mut f64,
) -> GlimStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (mu, s) = m.step_params(input(z_prefix, n_prefix, "z_prefix")?, n_prefix + 1)?;
        output(mean, 1, "mean")?[0] = mu;
        output(sd, 1, "sd")?[0] = s;
        Ok(())
    })
}
