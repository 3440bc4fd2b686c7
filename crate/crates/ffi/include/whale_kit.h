#ifndef WHALE_KIT_H
#define WHALE_KIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum WkStatus {
  WK_STATUS_OK = 0,
  WK_STATUS_NULL_POINTER = 1,
  WK_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad shapes, unknown languages, out-of-range options.
   */
  WK_STATUS_INVALID_ARGUMENT = 3,
  /**
   * The labels need more frames than the input has.
   */
  WK_STATUS_IMPOSSIBLE_ALIGNMENT = 4,
  /**
   * Unreadable or malformed files.
   */
  WK_STATUS_IO = 5,
  WK_STATUS_NUMERIC = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  WK_STATUS_INTERNAL = 7,
} WkStatus;

/**
 * A loaded recognition model.
 */
typedef struct WkModel WkModel;

/**
 * Beam search settings for [`wk_model_decode`].
 */
typedef struct WkDecodeOptions {
  size_t beam_size;
  /**
   * Weight of the CTC prefix score; the decoder gets `1 - lambda_ctc`.
   */
  double lambda_ctc;
  /**
   * Maximum number of emitted tokens.
   */
  size_t max_len;
} WkDecodeOptions;

typedef struct WkEditCounts {
  size_t substitutions;
  size_t deletions;
  size_t insertions;
  /**
   * Number of reference units (words, or characters for ja/zh/yue).
   */
  size_t reference_units;
} WkEditCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next whale-kit call on the same thread.
 */
const char *wk_last_error(void);

/**
 * Library version as a static string.
 */
const char *wk_version(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from a whale-kit out-parameter and not be freed twice.
 */
void wk_string_free(char *s);

/**
 * Default decoding options: beam 4, CTC weight 0.3, at most 48 tokens.
 */
struct WkDecodeOptions wk_decode_options_default(void);

/**
 * Loads a model directory written by `whale-kit train` or `pretrain`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a writable pointer.
 */
enum WkStatus wk_model_load(const char *dir, struct WkModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`wk_model_load`] and not be freed twice.
 */
void wk_model_free(struct WkModel *model);

/**
 * Feature dimension the model expects per frame.
 *
 * # Safety
 * `model` must be a live handle or NULL (which yields 0).
 */
size_t wk_model_feature_dim(const struct WkModel *model);

/**
 * Recognizes one utterance of `frames × dim` row-major features.
 * `language` forces the language token and `adapt_language` applies that
 * language's mask at the encoder taps; either may be NULL. The transcript
 * is written to `out_text`.
 *
 * # Safety
 * `features` must point to `frames * dim` floats; string arguments must
 * be NUL-terminated or NULL; `out_text` must be writable.
 */
enum WkStatus wk_model_decode(const struct WkModel *model,
                              const float *features,
                              size_t frames,
                              size_t dim,
                              const struct WkDecodeOptions *options,
                              const char *language,
                              const char *adapt_language,
                              char **out_text);

/**
 * Negative log-likelihood of `labels` under `t × v` row-major CTC
 * log-posteriors (blank is id 0).
 *
 * # Safety
 * `log_post` must point to `t * v` doubles, `labels` to `num_labels` ids.
 */
enum WkStatus wk_ctc_loss(const double *log_post,
                          size_t t,
                          size_t v,
                          const size_t *labels,
                          size_t num_labels,
                          double *out_loss);

/**
 * Normalizes both texts for `language` and counts minimal edits over
 * words, or characters for ja/zh/yue.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum WkStatus wk_edit_distance(const char *reference,
                               const char *hypothesis,
                               const char *language,
                               struct WkEditCounts *out);

/**
 * Scoring normalization of `text` for `language`, written to `out_text`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out_text` must be writable.
 */
enum WkStatus wk_normalize_text(const char *text, const char *language, char **out_text);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WHALE_KIT_H */
