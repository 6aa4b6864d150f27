#ifndef KNOWTAG_H
#define KNOWTAG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define KT_VERDICT_NO 0

#define KT_VERDICT_YES 1

#define KT_VERDICT_UNPARSEABLE -1

typedef enum KtStatus {
  KT_STATUS_OK = 0,
  KT_STATUS_NULL_POINTER = 1,
  KT_STATUS_INVALID_ARGUMENT = 2,
  KT_STATUS_IO = 3,
  KT_STATUS_FORMAT = 4,
  KT_STATUS_CONFIG = 5,
  KT_STATUS_NON_FINITE = 6,
  KT_STATUS_BACKEND = 7,
  KT_STATUS_BUFFER_TOO_SMALL = 8,
  KT_STATUS_PANIC = 9,
  KT_STATUS_INTERNAL = 10,
} KtStatus;

/**
 * A loaded retriever policy.
 */
typedef struct KtPolicy KtPolicy;

typedef struct KtMetrics {
  double accuracy;
  double precision;
  double recall;
  double f1;
  bool precision_undefined;
  bool recall_undefined;
} KtMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. The pointer stays
 * valid until the next knowtag call on the same thread.
 */
const char *kt_last_error_message(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void kt_string_free(char *s);

/**
 * Writes one of `KT_VERDICT_*` for a judge response.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `verdict_out` must be writable.
 */
enum KtStatus kt_parse_judgment(const char *text, int32_t *verdict_out);

/**
 * Renders the zero-shot judge prompt into a new string.
 *
 * # Safety
 * All strings must be NUL-terminated; `out` must be writable.
 */
enum KtStatus kt_render_zero_shot_prompt(const char *knowledge_id,
                                         const char *knowledge_text,
                                         const char *question_id,
                                         const char *question_text,
                                         char **out);

/**
 * # Safety
 * `a` and `b` must each point to `dim` floats; `out` must be writable.
 */
enum KtStatus kt_cosine_similarity(const float *a, const float *b, size_t dim, double *out);

/**
 * Loads a retriever parameter file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum KtStatus kt_policy_load(const char *path, struct KtPolicy **out);

/**
 * # Safety
 * `policy` must be null or a handle from [`kt_policy_load`] not yet freed.
 */
void kt_policy_free(struct KtPolicy *policy);

/**
 * # Safety
 * `policy` must be a live handle; the out-pointers must be writable.
 */
enum KtStatus kt_policy_dims(const struct KtPolicy *policy,
                             size_t *embedding_dim,
                             size_t *hidden,
                             size_t *layers);

/**
 * Greedy retrieval for one query. `bank` holds `bank_len` row-major
 * vectors of the policy's embedding dim. Selected bank indices are written
 * to `out_indices` in order; `out_stopped` reports whether the policy chose
 * Stop before reaching `max_steps`. Pass `excluded = -1` to offer every entry.
 *
 * # Safety
 * `x_k`, `x_q` must hold the embedding dim; `bank` `bank_len * dim`
 * doubles; `out_indices` room for `out_capacity` entries.
 */
enum KtStatus kt_policy_greedy_select(const struct KtPolicy *policy,
                                      const double *x_k,
                                      const double *x_q,
                                      const double *bank,
                                      size_t bank_len,
                                      size_t max_steps,
                                      bool stop_enabled,
                                      int64_t excluded,
                                      size_t *out_indices,
                                      size_t out_capacity,
                                      size_t *out_len,
                                      bool *out_stopped);

/**
 * +1 when `verdict` matches `gold` (0 or 1), otherwise -1; unparseable is -1.
 *
 * # Safety
 * `out` must be writable.
 */
enum KtStatus kt_eval_reward(int32_t verdict, int32_t gold, int32_t *out);

/**
 * Returns with stop bonus for one episode. `final_only` zeroes every
 * correctness reward except the last.
 *
 * # Safety
 * `rewards`, `bonuses` must hold `n` values and `out` room for `n`.
 */
enum KtStatus kt_discounted_returns(const int32_t *rewards,
                                    const int32_t *bonuses,
                                    size_t n,
                                    bool final_only,
                                    double gamma,
                                    double omega,
                                    double *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum KtStatus kt_metrics_from_counts(uint64_t tp,
                                     uint64_t fp,
                                     uint64_t tn,
                                     uint64_t fn_,
                                     struct KtMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KNOWTAG_H */
