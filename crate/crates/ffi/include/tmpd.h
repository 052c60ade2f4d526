#ifndef TMPD_H
#define TMPD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TmpdStatus {
  TMPD_STATUS_OK = 0,
  TMPD_STATUS_NULL_POINTER = 1,
  TMPD_STATUS_INVALID_ARGUMENT = 2,
  TMPD_STATUS_SHAPE = 3,
  TMPD_STATUS_LINALG = 4,
  TMPD_STATUS_NON_FINITE = 5,
  TMPD_STATUS_UNSUPPORTED = 6,
  TMPD_STATUS_DOMAIN = 7,
  TMPD_STATUS_IO = 8,
  TMPD_STATUS_BUFFER_TOO_SMALL = 9,
  TMPD_STATUS_PANIC = 10,
} TmpdStatus;

typedef struct TmpdMeasurement TmpdMeasurement;

typedef struct TmpdPrior TmpdPrior;

/*
 Row-major sample matrix, one sample per row.
 */
typedef struct TmpdSamples TmpdSamples;

/*
 Sampler settings. `guidance` and `sampler` are strings such as "tmpd",
 "dtmpd:rowsum", "dps-chung:1.0" and "ddpm-vp". Zero schedule fields
 select the defaults (beta in [0.1, 20], sigma in [0.01, 50]).
 */
typedef struct TmpdSamplerOptions {
  const char *guidance;
  const char *sampler;
  size_t steps;
  size_t batch;
  uint64_t seed;
  double beta_min;
  double beta_max;
  double sigma_min;
  double sigma_max;
} TmpdSamplerOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copy the calling thread's last error message into `buf` (NUL-terminated,
 truncated to `len`). Returns the full message length excluding the NUL.
 */
size_t tmpd_last_error(char *buf, size_t len);

/*
 Library version as a static NUL-terminated string.
 */
const char *tmpd_version(void);

/*
 The 25-component Gaussian mixture prior in dimension `d_x` (even, >= 2).
 */
enum TmpdStatus tmpd_prior_gmm(size_t d_x, struct TmpdPrior **out);

/*
 Zero-mean Matern-5/2 field on a `grid_side` x `grid_side` grid over [lo, hi]^2.
 */
enum TmpdStatus tmpd_prior_grf(size_t grid_side,
                               double lo,
                               double hi,
                               double jitter,
                               struct TmpdPrior **out);

/*
 Gaussian prior N(mean, cov) with `cov` a row-major d x d matrix.
 */
enum TmpdStatus tmpd_prior_gaussian(size_t d,
                                    const double *mean,
                                    const double *cov,
                                    struct TmpdPrior **out);

size_t tmpd_prior_dim(const struct TmpdPrior *prior);

/*
 Score of the noised marginal at noise level (alpha, v): x_t = sqrt(alpha) x_0 + sqrt(v) z.
 */
enum TmpdStatus tmpd_prior_score(const struct TmpdPrior *prior,
                                 double alpha,
                                 double v,
                                 const double *x,
                                 double *out,
                                 size_t len);

void tmpd_prior_free(struct TmpdPrior *prior);

/*
 y = H x + sigma_y e with `h` row-major d_y x d_x.
 */
enum TmpdStatus tmpd_measurement_new(const double *h,
                                     size_t d_y,
                                     size_t d_x,
                                     double sigma_y,
                                     const double *y,
                                     struct TmpdMeasurement **out);

/*
 Random measurement of a prior draw: a dense operator with uniform singular
 values, or with `mask` nonzero a random coordinate subset.
 */
enum TmpdStatus tmpd_measurement_generate(const struct TmpdPrior *prior,
                                          size_t d_y,
                                          double sigma_y,
                                          bool mask,
                                          uint64_t seed,
                                          struct TmpdMeasurement **out);

enum TmpdStatus tmpd_measurement_dims(const struct TmpdMeasurement *mm, size_t *d_y, size_t *d_x);

/*
 Copy the observation vector into `out` (length d_y).
 */
enum TmpdStatus tmpd_measurement_y(const struct TmpdMeasurement *mm, double *out, size_t len);

void tmpd_measurement_free(struct TmpdMeasurement *mm);

/*
 Guided posterior sampling; writes `opts.batch` samples.
 */
enum TmpdStatus tmpd_sample(const struct TmpdPrior *prior,
                            const struct TmpdMeasurement *mm,
                            const struct TmpdSamplerOptions *opts,
                            struct TmpdSamples **out);

/*
 `n` draws from the exact posterior of `prior` given `mm`.
 */
enum TmpdStatus tmpd_exact_posterior_sample(const struct TmpdPrior *prior,
                                            const struct TmpdMeasurement *mm,
                                            size_t n,
                                            uint64_t seed,
                                            struct TmpdSamples **out);

/*
 Wrap a row-major `rows` x `cols` buffer (copied).
 */
enum TmpdStatus tmpd_samples_new(const double *data,
                                 size_t rows,
                                 size_t cols,
                                 struct TmpdSamples **out);

enum TmpdStatus tmpd_samples_shape(const struct TmpdSamples *s, size_t *rows, size_t *cols);

/*
 Borrowed pointer to the row-major data; valid until `tmpd_samples_free`.
 */
const double *tmpd_samples_data(const struct TmpdSamples *s);

void tmpd_samples_free(struct TmpdSamples *s);

enum TmpdStatus tmpd_sliced_w1(const struct TmpdSamples *a,
                               const struct TmpdSamples *b,
                               size_t n_slices,
                               uint64_t seed,
                               double *out);

/*
 W2 between N(m1, c1) and N(m2, c2); covariances row-major d x d.
 */
enum TmpdStatus tmpd_gaussian_w2(size_t d,
                                 const double *m1,
                                 const double *c1,
                                 const double *m2,
                                 const double *c2,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TMPD_H */
