#ifndef PULSE_H
#define PULSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  PULSE_STATUS_OK = 0,
  PULSE_STATUS_NULL_POINTER = 1,
  PULSE_STATUS_INVALID_ARGUMENT = 2,
  PULSE_STATUS_IO = 3,
  PULSE_STATUS_FORMAT = 4,
  PULSE_STATUS_SHAPE = 5,
  PULSE_STATUS_CONFIG = 6,
  PULSE_STATUS_DIVERGED = 7,
  PULSE_STATUS_NON_FINITE = 8,
  PULSE_STATUS_INTERNAL = 99,
} PulseStatus;

/**
 * A loaded encoder checkpoint.
 */
typedef struct PulseEncoder PulseEncoder;

/**
 * A loaded fold archive.
 */
typedef struct PulseFold PulseFold;

/**
 * Per-fold metrics of one preset run.
 */
typedef struct PulseReport PulseReport;

typedef struct {
  double auroc;
  double auprc;
  double accuracy;
  double threshold;
} PulseBinaryMetrics;

typedef struct {
  double mean_pairwise_cosine;
  double mean_feature_variance;
  size_t excluded_pairs;
} PulseCollapse;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library on this thread.
 */
const char *pulse_last_error(void);

/**
 * Static, NUL-terminated version string.
 */
const char *pulse_version(void);

PulseStatus pulse_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

PulseStatus pulse_auprc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * AUROC, AUPRC and accuracy at `threshold` (`score >= threshold` is positive).
 */
PulseStatus pulse_binary_metrics(const double *scores,
                                 const uint8_t *labels,
                                 size_t n,
                                 double threshold,
                                 PulseBinaryMetrics *out);

/**
 * One-vs-rest macro metrics; `scores` is row-major `[n, k]`, accuracy is by argmax.
 */
PulseStatus pulse_macro_multiclass(const double *scores,
                                   const uint32_t *classes,
                                   size_t n,
                                   size_t k,
                                   PulseBinaryMetrics *out);

/**
 * Collapse statistics of row-major embeddings `[n, d]`.
 */
PulseStatus pulse_collapse_diagnostics(const float *emb, size_t n, size_t d, PulseCollapse *out);

PulseStatus pulse_fold_open(const char *path, PulseFold **out);

/**
 * Fold id, training and test window counts.
 */
PulseStatus pulse_fold_info(const PulseFold *fold,
                            uint32_t *fold_id,
                            size_t *n_train,
                            size_t *n_test);

void pulse_fold_free(PulseFold *fold);

PulseStatus pulse_encoder_load(const char *path, PulseEncoder **out);

/**
 * Window length in samples and embedding width.
 */
PulseStatus pulse_encoder_shape(const PulseEncoder *enc, size_t *window_len, size_t *dim);

/**
 * Mean-pooled encoder output of `n` normalised windows (row-major
 * `[n, window_len]`) into `out` (`[n, dim]`).
 */
PulseStatus pulse_encoder_embed(const PulseEncoder *enc,
                                const float *windows,
                                size_t n,
                                float *out);

void pulse_encoder_free(PulseEncoder *enc);

/**
 * Runs `preset` (one of "A".."E") for one seed. `config_toml` may be null
 * for the defaults; `folds_dir` null means synthetic data, in which case the
 * small synthetic profile is the base the config is layered over.
 */
PulseStatus pulse_run_preset(const char *preset,
                             const char *config_toml,
                             const char *folds_dir,
                             uint64_t seed,
                             PulseReport **out);

PulseStatus pulse_report_n_folds(const PulseReport *report, size_t *out);

/**
 * Metrics of fold `i` (0-based, in fold order).
 */
PulseStatus pulse_report_fold(const PulseReport *report, size_t i, PulseBinaryMetrics *out);

/**
 * Mean and sample sd of the per-fold AUROC.
 */
PulseStatus pulse_report_auroc(const PulseReport *report, double *mean, double *sd);

void pulse_report_free(PulseReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PULSE_H */
