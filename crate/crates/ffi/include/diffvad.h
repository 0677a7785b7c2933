#ifndef DIFFVAD_H
#define DIFFVAD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DvStatus {
  DV_STATUS_OK = 0,
  DV_STATUS_INVALID_ARGUMENT = 1,
  DV_STATUS_DATA_ERROR = 2,
  DV_STATUS_NUMERIC = 3,
  DV_STATUS_NULL_POINTER = 4,
  DV_STATUS_UNDEFINED_AUC = 5,
  DV_STATUS_PANIC = 6,
} DvStatus;

typedef struct DvFeatureSet DvFeatureSet;

typedef struct DvModel DvModel;

typedef struct DvScores DvScores;

/**
 * Scoring parameters. A non-positive `sigma_min`/`sigma_max` means
 * "derive from the checkpoint's training noise".
 */
typedef struct DvScoreParams {
  size_t steps;
  double sigma_min;
  double sigma_max;
  double rho;
  size_t start_t;
  double k;
  size_t batch_size;
  uint64_t seed;
  bool use_ema;
} DvScoreParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into this library on the same thread.
 */
const char *dv_last_error(void);

/**
 * # Safety
 * `features` and `manifest` must be NUL-terminated paths; `out` must be valid.
 */
enum DvStatus dv_featureset_load(const char *features,
                                 const char *manifest,
                                 struct DvFeatureSet **out);

/**
 * Synthetic set with the library defaults except the given fields.
 *
 * # Safety
 * `out` must be valid.
 */
enum DvStatus dv_featureset_synth(size_t n_normal,
                                  size_t n_anomalous,
                                  size_t dim,
                                  double shift,
                                  uint64_t seed,
                                  struct DvFeatureSet **out);

/**
 * # Safety
 * `fs` must come from this library or be null.
 */
size_t dv_featureset_len(const struct DvFeatureSet *fs);

/**
 * # Safety
 * `fs` must come from this library or be null.
 */
size_t dv_featureset_dim(const struct DvFeatureSet *fs);

/**
 * # Safety
 * `fs` must come from this library or be null; it is invalid afterwards.
 */
void dv_featureset_free(struct DvFeatureSet *fs);

/**
 * # Safety
 * `path` must be a NUL-terminated path; `out` must be valid.
 */
enum DvStatus dv_model_load(const char *path, struct DvModel **out);

/**
 * # Safety
 * `model` must come from this library or be null.
 */
size_t dv_model_input_dim(const struct DvModel *model);

/**
 * `D(x; σ)` for a row-major `rows × cols` block, written to `out`
 * (same size). Inputs are in the model's training space (after any
 * centering recorded in the checkpoint).
 *
 * # Safety
 * `x` and `out` must hold `rows * cols` doubles.
 */
enum DvStatus dv_model_denoise(const struct DvModel *model,
                               const double *x,
                               size_t rows,
                               size_t cols,
                               double sigma,
                               bool use_ema,
                               double *out);

/**
 * # Safety
 * `model` must come from this library or be null; it is invalid afterwards.
 */
void dv_model_free(struct DvModel *model);

/**
 * Defaults: T = 10, bounds from training noise, ρ = 7, t = T − 1, k = 1.
 */
struct DvScoreParams dv_score_params_default(void);

/**
 * # Safety
 * `model`, `fs` and `out` must be valid; `params` may be null for defaults.
 */
enum DvStatus dv_score_dataset(const struct DvModel *model,
                               const struct DvFeatureSet *fs,
                               const struct DvScoreParams *params,
                               struct DvScores **out);

/**
 * # Safety
 * `scores` must come from this library or be null.
 */
size_t dv_scores_len(const struct DvScores *scores);

/**
 * Copies up to `len` per-segment MSE values and 0/1 flags in manifest
 * order. Either output may be null to skip it.
 *
 * # Safety
 * Non-null outputs must hold `len` elements.
 */
enum DvStatus dv_scores_copy(const struct DvScores *scores,
                             double *mse,
                             uint8_t *flags,
                             size_t len);

/**
 * Frame-level AUC of `scores` against the labels in `fs`'s manifest.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DvStatus dv_scores_evaluate(const struct DvScores *scores,
                                 const struct DvFeatureSet *fs,
                                 double *auc);

/**
 * # Safety
 * `scores` must come from this library or be null; it is invalid afterwards.
 */
void dv_scores_free(struct DvScores *scores);

/**
 * # Safety
 * `scores` and `labels` must hold `n` elements; `out` must be valid.
 */
enum DvStatus dv_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Writes the `steps + 1` schedule levels (ending with 0) to `out`.
 *
 * # Safety
 * `out` must hold `out_len` doubles.
 */
enum DvStatus dv_karras_schedule(size_t steps,
                                 double sigma_min,
                                 double sigma_max,
                                 double rho,
                                 double *out,
                                 size_t out_len);

/**
 * # Safety
 * `sigma_min` and `sigma_max` must be valid.
 */
enum DvStatus dv_noise_bounds(double p_mean, double p_std, double *sigma_min, double *sigma_max);

/**
 * # Safety
 * `losses` must hold `n` doubles; outputs must be valid.
 */
enum DvStatus dv_batch_threshold(const double *losses,
                                 size_t n,
                                 double k,
                                 double *mu,
                                 double *sigma,
                                 double *l_th);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFVAD_H */
