#ifndef FLOWMC_H
#define FLOWMC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes returned by every fallible function.
typedef enum FlowmcStatus {
  FLOWMC_STATUS_OK = 0,
  FLOWMC_STATUS_NULL_POINTER = 1,
  FLOWMC_STATUS_INVALID_ARGUMENT = 2,
  FLOWMC_STATUS_DIMENSION_MISMATCH = 3,
  FLOWMC_STATUS_NUMERICAL = 4,
  FLOWMC_STATUS_FORMAT = 5,
  FLOWMC_STATUS_IO = 6,
  FLOWMC_STATUS_PANIC = 7,
} FlowmcStatus;

// Velocity or score field handle.
typedef struct FlowmcField FlowmcField;

// Target distribution handle.
typedef struct FlowmcTarget FlowmcTarget;

// Summary of a transport importance-sampling run.
typedef struct FlowmcEstimate {
  double z_ratio;
  double z_ratio_std_error;
  double log_z_ratio;
  double ess;
  double ess_fraction;
  size_t n_failed;
} FlowmcEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of the calling thread into `buf` as a
// NUL-terminated string, truncating if needed. Returns the full message
// length in bytes, excluding the terminator.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t flowmc_last_error(char *buf, size_t len);

// Standard normal target in `dim` dimensions.
//
// # Safety
// `out` must be valid for a pointer write.
enum FlowmcStatus flowmc_target_standard_normal(size_t dim, struct FlowmcTarget **out);

// Gaussian `N(0, alpha^-1 I)`.
//
// # Safety
// `out` must be valid for a pointer write.
enum FlowmcStatus flowmc_target_isotropic_gaussian(size_t dim,
                                                   double alpha,
                                                   struct FlowmcTarget **out);

// Double-well potential `a (x0^2 - 1)^2 + |x_rest|^2 / 2`.
//
// # Safety
// `out` must be valid for a pointer write.
enum FlowmcStatus flowmc_target_double_well(size_t dim, double a, struct FlowmcTarget **out);

// Mixture of isotropic Gaussians. `means` is row-major `n_modes x dim`,
// `probs` and `variances` have `n_modes` entries.
//
// # Safety
// Array arguments must be valid for the stated lengths; `out` for a pointer write.
enum FlowmcStatus flowmc_target_gaussian_mixture(size_t dim,
                                                 size_t n_modes,
                                                 const double *probs,
                                                 const double *means,
                                                 const double *variances,
                                                 struct FlowmcTarget **out);

// Releases a target. Null is ignored.
//
// # Safety
// `t` must come from a target constructor and not be used afterwards.
void flowmc_target_free(struct FlowmcTarget *t);

// Dimension of a target, 0 for null.
//
// # Safety
// `t` must be null or a live target.
size_t flowmc_target_dim(const struct FlowmcTarget *t);

// Potential `U(x)`, the negative unnormalized log density.
//
// # Safety
// `x` must hold `len` values; `out` must be valid for a write.
enum FlowmcStatus flowmc_target_potential(const struct FlowmcTarget *t,
                                          const double *x,
                                          size_t len,
                                          double *out);

// Gradient of the potential, written to `grad` (`len` values).
//
// # Safety
// `x` and `grad` must hold `len` values.
enum FlowmcStatus flowmc_target_grad_potential(const struct FlowmcTarget *t,
                                               const double *x,
                                               size_t len,
                                               double *grad);

// Tanh network velocity field with `n_hidden` layers of the given widths.
//
// # Safety
// `hidden` must hold `n_hidden` values; `out` must be valid for a pointer write.
enum FlowmcStatus flowmc_field_mlp(size_t dim,
                                   const size_t *hidden,
                                   size_t n_hidden,
                                   uint64_t seed,
                                   double init_scale,
                                   struct FlowmcField **out);

// Affine field `v(t, x) = A x + b` with `A` row-major `dim x dim`.
//
// # Safety
// `a` must hold `dim * dim` values and `b` `dim` values.
enum FlowmcStatus flowmc_field_affine(size_t dim,
                                      const double *a,
                                      const double *b,
                                      struct FlowmcField **out);

// Loads the field stored in a training checkpoint.
//
// # Safety
// `path` must be a NUL-terminated UTF-8 string.
enum FlowmcStatus flowmc_field_load(const char *path, struct FlowmcField **out);

// Releases a field. Null is ignored.
//
// # Safety
// `f` must come from a field constructor and not be used afterwards.
void flowmc_field_free(struct FlowmcField *f);

// Dimension of a field, 0 for null.
//
// # Safety
// `f` must be null or a live field.
size_t flowmc_field_dim(const struct FlowmcField *f);

// Number of trainable parameters, 0 for null.
//
// # Safety
// `f` must be null or a live field.
size_t flowmc_field_n_params(const struct FlowmcField *f);

// Copies the parameter vector into `out`, which must hold exactly
// `flowmc_field_n_params` values.
//
// # Safety
// `out` must hold `len` values.
enum FlowmcStatus flowmc_field_params(const struct FlowmcField *f, double *out, size_t len);

// Velocity `v(t, x)` and divergence at one point.
//
// # Safety
// `x` and `v` must hold `len` values; `div` may be null.
enum FlowmcStatus flowmc_field_velocity(const struct FlowmcField *f,
                                        double t,
                                        const double *x,
                                        size_t len,
                                        double *v,
                                        double *div);

// Pushes `x` from t = 0 to t = 1 with `n_steps` RK4 steps. Writes the image
// to `y` and the log-Jacobian to `logjac` (may be null).
//
// # Safety
// `x` and `y` must hold `len` values.
enum FlowmcStatus flowmc_flow_forward(const struct FlowmcField *f,
                                      const double *x,
                                      size_t len,
                                      size_t n_steps,
                                      double *y,
                                      double *logjac);

// Pulls `x` back from t = 1 to t = 0; the inverse of [`flowmc_flow_forward`].
//
// # Safety
// `x` and `y` must hold `len` values.
enum FlowmcStatus flowmc_flow_backward(const struct FlowmcField *f,
                                       const double *x,
                                       size_t len,
                                       size_t n_steps,
                                       double *y,
                                       double *logjac);

// Transport importance sampling from a standard normal base: draws `n`
// base points from the seeded stream, pushes them through `f`, and reports
// the normalizing-constant ratio and weight diagnostics.
//
// # Safety
// `out` must be valid for a write.
enum FlowmcStatus flowmc_estimate(const struct FlowmcField *f,
                                  const struct FlowmcTarget *t,
                                  size_t n,
                                  size_t n_steps,
                                  uint64_t seed,
                                  struct FlowmcEstimate *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWMC_H */
