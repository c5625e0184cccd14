#ifndef AVSNN_H
#define AVSNN_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AvsnnStatus {
  AVSNN_STATUS_OK = 0,
  AVSNN_STATUS_SHAPE = 1,
  AVSNN_STATUS_NOT_BINARY = 2,
  AVSNN_STATUS_STALE_TAPE = 3,
  AVSNN_STATUS_STATE = 4,
  AVSNN_STATUS_CONTRACT = 5,
  AVSNN_STATUS_ALIGNMENT = 6,
  AVSNN_STATUS_CONFIG = 7,
  AVSNN_STATUS_EMPTY_INPUT = 8,
  AVSNN_STATUS_DEGENERATE_INPUT = 9,
  AVSNN_STATUS_NUMERIC = 10,
  AVSNN_STATUS_CHECKPOINT = 11,
  AVSNN_STATUS_FORMAT = 12,
  AVSNN_STATUS_IO = 13,
  AVSNN_STATUS_JSON = 14,
  AVSNN_STATUS_WAV = 15,
  AVSNN_STATUS_NULL_POINTER = 16,
  AVSNN_STATUS_INVALID_ARGUMENT = 17,
  AVSNN_STATUS_PANIC = 18,
} AvsnnStatus;

/**
 * Opaque model handle.
 */
typedef struct AvsnnModel AvsnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *avsnn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *avsnn_version(void);

/**
 * Builds a randomly initialized model. `config_json` is a network
 * configuration object, or null for the defaults.
 *
 * # Safety
 * `config_json` must be null or a valid NUL-terminated string; `out` must be
 * a valid pointer.
 */
enum AvsnnStatus avsnn_model_new(const char *config_json, uint64_t seed, struct AvsnnModel **out);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum AvsnnStatus avsnn_model_load(const char *path, struct AvsnnModel **out);

/**
 * Writes the model's parameters as a checkpoint.
 *
 * # Safety
 * `model` must come from this library and `path` be a valid NUL-terminated string.
 */
enum AvsnnStatus avsnn_model_save(const struct AvsnnModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void avsnn_model_free(struct AvsnnModel *model);

/**
 * Number of timesteps `T`, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t avsnn_model_timesteps(const struct AvsnnModel *model);

/**
 * Number of classes `C`, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t avsnn_model_num_classes(const struct AvsnnModel *model);

/**
 * Scalar parameter count, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t avsnn_model_num_parameters(const struct AvsnnModel *model);

/**
 * Eval-mode forward on one sample.
 *
 * `voxels` is `[steps][2][H][W]` of 0/1 values and `audio` is
 * `[steps][F]`; either may be null when the model does not use it.
 * `logits` receives `[steps][C]` and must hold `logits_len` values.
 *
 * # Safety
 * Non-null buffers must hold the stated number of values.
 */
enum AvsnnStatus avsnn_model_infer(struct AvsnnModel *model,
                                   const double *voxels,
                                   const double *audio,
                                   size_t steps,
                                   double *logits,
                                   size_t logits_len);

/**
 * Class with the largest logit summed over the first `upto_t` steps
 * (all steps when `upto_t` is 0). Ties go to the lower index.
 *
 * # Safety
 * `logits` must hold `steps * classes` values and `out_class` be valid.
 */
enum AvsnnStatus avsnn_predict(const double *logits,
                               size_t steps,
                               size_t classes,
                               size_t upto_t,
                               size_t *out_class);

/**
 * Energy in millijoules for the given multiplication and addition counts.
 */
double avsnn_energy_from_counts(double mult, double add);

/**
 * Number of mel bins per feature frame.
 */
size_t avsnn_mel_bins(void);

/**
 * Log mel filterbank features standardized to `steps` frames; `out`
 * receives `[steps][avsnn_mel_bins()]` values.
 *
 * # Safety
 * `samples` must hold `n` values and `out` `out_len` values.
 */
enum AvsnnStatus avsnn_fbank(const double *samples,
                             size_t n,
                             uint32_t sample_rate,
                             size_t steps,
                             double *out,
                             size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AVSNN_H */
