#ifndef HLAT_H
#define HLAT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HlatStatus {
  HLAT_STATUS_OK = 0,
  HLAT_STATUS_NULL_POINTER = 1,
  HLAT_STATUS_INVALID_UTF8 = 2,
  // Wrong lengths, shapes or token ids.
  HLAT_STATUS_CONTRACT = 3,
  // A file did not match its declared layout.
  HLAT_STATUS_FORMAT = 4,
  HLAT_STATUS_IO = 5,
  HLAT_STATUS_CONFIG = 6,
  // Rank correlation undefined because a map is constant.
  HLAT_STATUS_UNDEFINED_CORRELATION = 7,
  // The output buffer is too small; nothing was written.
  HLAT_STATUS_BUFFER_TOO_SMALL = 8,
  HLAT_STATUS_PANIC = 99,
} HlatStatus;

// Trained attention network.
typedef struct HlatHan HlatHan;

// Trained answerer.
typedef struct HlatVqa HlatVqa;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call into this library on the same thread.
const char *hlat_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *hlat_version(void);

// Load an attention-network checkpoint into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum HlatStatus hlat_han_load(const char *path, struct HlatHan **out);

// Grid and vocabulary sizes the network expects. Any output pointer may be null.
//
// # Safety
// `han` must come from [`hlat_han_load`].
enum HlatStatus hlat_han_dims(const struct HlatHan *han,
                              size_t *channels,
                              size_t *side,
                              size_t *vocab);

// Predict an attention map (`side²` values on the simplex) into `out_map`.
//
// # Safety
// Pointers must reference at least the stated number of elements.
enum HlatStatus hlat_han_predict(const struct HlatHan *han,
                                 const double *features,
                                 size_t features_len,
                                 const size_t *tokens,
                                 size_t tokens_len,
                                 double *out_map,
                                 size_t out_len);

// # Safety
// `han` must come from [`hlat_han_load`] and not be used afterwards. Null is ignored.
void hlat_han_free(struct HlatHan *han);

// Load an answerer checkpoint into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum HlatStatus hlat_vqa_load(const char *path, struct HlatVqa **out);

// Grid, vocabulary and answer-set sizes; any output pointer may be null.
// `supervised` is set to 1 for a model trained with attention supervision.
//
// # Safety
// `vqa` must come from [`hlat_vqa_load`].
enum HlatStatus hlat_vqa_dims(const struct HlatVqa *vqa,
                              size_t *channels,
                              size_t *side,
                              size_t *vocab,
                              size_t *answers,
                              size_t *supervised);

// Answer distribution into `out_dist` and the chosen answer index into `*out_answer`
// (lowest index among ties). `out_answer` may be null.
//
// # Safety
// Pointers must reference at least the stated number of elements.
enum HlatStatus hlat_vqa_predict(const struct HlatVqa *vqa,
                                 const double *features,
                                 size_t features_len,
                                 const size_t *tokens,
                                 size_t tokens_len,
                                 double *out_dist,
                                 size_t out_len,
                                 size_t *out_answer);

// The answerer's attention map (glimpse softmaxes averaged) into `out_map`.
//
// # Safety
// Pointers must reference at least the stated number of elements.
enum HlatStatus hlat_vqa_attention(const struct HlatVqa *vqa,
                                   const double *features,
                                   size_t features_len,
                                   const size_t *tokens,
                                   size_t tokens_len,
                                   double *out_map,
                                   size_t out_len);

// # Safety
// `vqa` must come from [`hlat_vqa_load`] and not be used afterwards. Null is ignored.
void hlat_vqa_free(struct HlatVqa *vqa);

// Rank correlation of two maps of length `n`. A nonzero `literal_grid` uses
// the `l² − l` denominator with `l = √n`.
//
// # Safety
// `a` and `b` must each hold `n` doubles; `out` must be valid.
enum HlatStatus hlat_spearman(const double *a,
                              const double *b,
                              size_t n,
                              bool literal_grid,
                              double *out);

// Mean rank correlation of `pred` against `annotators` maps stored back to back
// (`annotators_count × n` doubles).
//
// # Safety
// Pointers must reference at least the stated number of elements.
enum HlatStatus hlat_mean_rank_correlation(const double *pred,
                                           size_t n,
                                           const double *annotators,
                                           size_t annotators_count,
                                           bool literal_grid,
                                           double *out);

// `min(#votes matching pred / 3, 1)` after trimming and lowercasing.
//
// # Safety
// `pred` and each of the `votes_count` entries of `votes` must be NUL-terminated strings.
enum HlatStatus hlat_consensus_accuracy(const char *pred,
                                        const char *const *votes,
                                        size_t votes_count,
                                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HLAT_H */
