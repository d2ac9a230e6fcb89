#ifndef CDTE_H
#define CDTE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CdteStatisticKind {
  CDTE_STATISTIC_KIND_MEAN = 0,
  CDTE_STATISTIC_KIND_QUANTILE = 1,
  CDTE_STATISTIC_KIND_SUPERQUANTILE = 2,
  CDTE_STATISTIC_KIND_KL_RISK = 3,
} CdteStatisticKind;

typedef enum CdteFinalStage {
  CDTE_FINAL_STAGE_FOREST = 0,
  /**
   * OLS on `(1, x)`.
   */
  CDTE_FINAL_STAGE_OLS = 1,
} CdteFinalStage;

typedef enum CdteStatus {
  CDTE_STATUS_OK = 0,
  CDTE_STATUS_NULL_POINTER = 1,
  CDTE_STATUS_INVALID_ARGUMENT = 2,
  CDTE_STATUS_IO = 3,
  CDTE_STATUS_PARSE = 4,
  CDTE_STATUS_CONFIG = 5,
  CDTE_STATUS_NUMERICAL = 6,
  CDTE_STATUS_DEGENERATE_SPLIT = 7,
  CDTE_STATUS_PANIC = 8,
} CdteStatus;

/**
 * Opaque dataset handle.
 */
typedef struct CdteDataset CdteDataset;

/**
 * Opaque fitted model handle.
 */
typedef struct CdteModel CdteModel;

/**
 * `tau` applies to quantiles and superquantiles, `delta` to the KL risk.
 */
typedef struct CdteFitOptions {
  enum CdteStatisticKind statistic;
  double tau;
  double delta;
  uint32_t folds;
  uint64_t seed;
  enum CdteFinalStage final_stage;
} CdteFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *cdte_last_error_message(void);

/**
 * Defaults: superquantile at 0.75, 5 folds, seed 0, forest final stage.
 */
struct CdteFitOptions cdte_fit_options_default(void);

/**
 * Build a dataset from row-major covariates `x` (`n * d`), treatments `a`
 * (0 or 1) and outcomes `y`.
 *
 * # Safety
 * The arrays must hold `n * d`, `n` and `n` values; `out` must be writable.
 */
enum CdteStatus cdte_dataset_new(const double *x,
                                 const uint8_t *a,
                                 const double *y,
                                 size_t n,
                                 size_t d,
                                 struct CdteDataset **out);

/**
 * Load a dataset from a headered CSV file.
 *
 * # Safety
 * Strings must be NUL-terminated; `features` must hold `n_features` strings.
 */
enum CdteStatus cdte_dataset_load_csv(const char *path,
                                      const char *outcome,
                                      const char *treatment,
                                      const char *const *features,
                                      size_t n_features,
                                      struct CdteDataset **out);

/**
 * # Safety
 * `data` must be a live handle; `n` and `d` writable.
 */
enum CdteStatus cdte_dataset_shape(const struct CdteDataset *data, size_t *n, size_t *d);

/**
 * # Safety
 * `data` must be null or a handle not yet freed.
 */
void cdte_dataset_free(struct CdteDataset *data);

/**
 * Fit the cross-fitted learner with default nuisance learners.
 *
 * # Safety
 * `data` must be a live handle, `options` readable and `out` writable.
 */
enum CdteStatus cdte_fit(const struct CdteDataset *data,
                         const struct CdteFitOptions *options,
                         struct CdteModel **out);

/**
 * Predict the effect at `n` row-major points of dimension `d`.
 *
 * # Safety
 * `x` must hold `n * d` values and `out` room for `n`.
 */
enum CdteStatus cdte_model_predict(const struct CdteModel *model,
                                   const double *x,
                                   size_t n,
                                   size_t d,
                                   double *out);

/**
 * Copy the cross-fitted pseudo-outcomes (in dataset row order) into `out`,
 * which must have room for exactly `len` = n values.
 *
 * # Safety
 * `out` must have room for `len` values.
 */
enum CdteStatus cdte_model_pseudo_outcomes(const struct CdteModel *model, double *out, size_t len);

/**
 * Linear projection of the pseudo-outcomes on `(1, x[columns...])` with HC1
 * intervals at `level`. Each output buffer holds `n_columns + 1` values,
 * intercept first; `stderr`, `lower` and `upper` may be null.
 *
 * # Safety
 * `model` and `data` must be the live handles used for the fit.
 */
enum CdteStatus cdte_model_projection(const struct CdteModel *model,
                                      const struct CdteDataset *data,
                                      const size_t *columns,
                                      size_t n_columns,
                                      double level,
                                      double *coef,
                                      double *stderr,
                                      double *lower,
                                      double *upper);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void cdte_model_free(struct CdteModel *model);

/**
 * # Safety
 * `values` and `weights` must hold `n` values; `out` must be writable.
 */
enum CdteStatus cdte_weighted_quantile(const double *values,
                                       const double *weights,
                                       size_t n,
                                       double tau,
                                       double *out);

/**
 * # Safety
 * `values` and `weights` must hold `n` values; `out` must be writable.
 */
enum CdteStatus cdte_weighted_superquantile(const double *values,
                                            const double *weights,
                                            size_t n,
                                            double tau,
                                            double *out);

/**
 * Weighted EVaR at KL radius `delta`; `beta_out` may be null.
 *
 * # Safety
 * `values` and `weights` must hold `n` values; `out` must be writable.
 */
enum CdteStatus cdte_weighted_evar(const double *values,
                                   const double *weights,
                                   size_t n,
                                   double delta,
                                   double *out,
                                   double *beta_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDTE_H */
