#ifndef GLIM_H
#define GLIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GlimStatus {
  GLIM_STATUS_OK = 0,
  GLIM_STATUS_INVALID_ARGUMENT = 1,
  GLIM_STATUS_DOMAIN = 2,
  GLIM_STATUS_NUMERICAL = 3,
  GLIM_STATUS_RANGE = 4,
  GLIM_STATUS_DEGENERATE = 5,
  GLIM_STATUS_VALIDATION = 6,
  GLIM_STATUS_CONFIG = 7,
  GLIM_STATUS_FIT = 8,
  GLIM_STATUS_INPUT = 9,
  GLIM_STATUS_IO = 10,
  GLIM_STATUS_NULL_POINTER = 11,
  GLIM_STATUS_PANIC = 12,
} GlimStatus;

// Opaque path model handle. Create with `glim_model_new` or
// `glim_model_new_exp_linear`, release with `glim_model_free`.
typedef struct GlimModel GlimModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. The pointer is
// valid until the next failing call on the same thread.
const char *glim_last_error(void);

// Standard normal CDF.
//
// # Safety
// `out` must point to a writable double.
enum GlimStatus glim_normal_cdf(double x, double *out);

// Standard normal quantile for `p` in (0, 1).
//
// # Safety
// `out` must point to a writable double.
enum GlimStatus glim_normal_quantile(double p, double *out);

// Model from a row-major `horizon x horizon` covariance and a start `y0`.
// Probabilities are clamped to `[clamp, 1 - clamp]` before probits.
//
// # Safety
// `sigma` must hold `horizon * horizon` doubles; `out` must be writable.
enum GlimStatus glim_model_new(const double *sigma,
                               size_t horizon,
                               double y0,
                               double clamp,
                               struct GlimModel **out);

// Model with AR(1) correlation `rho` and variances `exp(beta.x (t - 1))`.
//
// # Safety
// `beta` and `x` must each hold `n_cov` doubles; `out` must be writable.
enum GlimStatus glim_model_new_exp_linear(double rho,
                                          const double *beta,
                                          const double *x,
                                          size_t n_cov,
                                          size_t horizon,
                                          double y0,
                                          double clamp,
                                          struct GlimModel **out);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from a constructor here and not be used afterwards.
void glim_model_free(struct GlimModel *model);

// Writes the horizon `T`.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum GlimStatus glim_model_horizon(const struct GlimModel *model, size_t *out);

// Writes the identified offset `gamma`.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum GlimStatus glim_model_gamma(const struct GlimModel *model, double *out);

// Log-density of a resolved path `y_0..y_T` (`len = T + 1`, `y_T` in {0, 1}).
//
// # Safety
// `model` must be a live handle; `y` must hold `len` doubles; `out` must be writable.
enum GlimStatus glim_model_log_density(const struct GlimModel *model,
                                       const double *y,
                                       size_t len,
                                       double *out);

// Samples one path `y_0..y_T` into `out` (`len = T + 1`). Equal seeds give
// equal paths.
//
// # Safety
// `model` must be a live handle; `out` must hold `len` doubles.
enum GlimStatus glim_model_sample(const struct GlimModel *model,
                                  uint64_t seed,
                                  double *out,
                                  size_t len);

// Recovers `z_1..z_{T-1}` from interior forecasts `y_1..y_{T-1}` (`len = T - 1`).
//
// # Safety
// `model` must be a live handle; `interior` and `out` must each hold `len` doubles.
enum GlimStatus glim_model_recover_latents(const struct GlimModel *model,
                                           const double *interior,
                                           size_t len,
                                           double *out);

// Mean and standard deviation of `Phi^{-1}(Y_t)` given `z_1..z_{t-1}`
// (`n_prefix = t - 1`).
//
// # Safety
// `model` must be a live handle; `z_prefix` must hold `n_prefix` doubles;
// `mean` and `sd` must be writable.
enum GlimStatus glim_model_step_params(const struct GlimModel *model,
                                       const double *z_prefix,
                                       size_t n_prefix,
                                       double *mean,
                                       double *sd);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLIM_H */
