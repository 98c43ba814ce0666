#ifndef KVTRIAGE_H
#define KVTRIAGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

enum KvtAllocation
#ifdef __cplusplus
  : uint32_t
#endif // __cplusplus
 {
  KVT_ALLOCATION_FLAT = 0,
  KVT_ALLOCATION_ADAPTIVE = 1,
};
#ifndef __cplusplus
typedef uint32_t KvtAllocation;
#endif // __cplusplus

enum KvtLogitScale
#ifdef __cplusplus
  : uint32_t
#endif // __cplusplus
 {
  KVT_LOGIT_SCALE_SQRT_HEAD_DIM = 0,
  KVT_LOGIT_SCALE_NONE = 1,
};
#ifndef __cplusplus
typedef uint32_t KvtLogitScale;
#endif // __cplusplus

enum KvtMetric
#ifdef __cplusplus
  : uint32_t
#endif // __cplusplus
 {
  KVT_METRIC_L1 = 0,
  KVT_METRIC_L2 = 1,
};
#ifndef __cplusplus
typedef uint32_t KvtMetric;
#endif // __cplusplus

enum KvtSelector
#ifdef __cplusplus
  : uint32_t
#endif // __cplusplus
 {
  KVT_SELECTOR_PERTURBATION_CONSTRAINED = 0,
  KVT_SELECTOR_ATTENTION_ONLY = 1,
};
#ifndef __cplusplus
typedef uint32_t KvtSelector;
#endif // __cplusplus

typedef enum KvtStatus {
  KVT_STATUS_OK = 0,
  KVT_STATUS_NULL_POINTER = 1,
  KVT_STATUS_INVALID_ARGUMENT = 2,
  KVT_STATUS_SHAPE = 3,
  KVT_STATUS_NON_FINITE = 4,
  KVT_STATUS_BUDGET = 5,
  KVT_STATUS_IO = 6,
  KVT_STATUS_FORMAT = 7,
  KVT_STATUS_DEGENERATE_MASK = 8,
  KVT_STATUS_PANIC = 9,
} KvtStatus;

/**
 * Opaque head handle.
 */
typedef struct KvtHead KvtHead;

/**
 * Eviction settings. Obtain defaults from `kvt_eviction_config_default`.
 */
typedef struct KvtEvictionConfig {
  /**
   * Per-head budget as a fraction of entries, used when `budget_count` is 0.
   */
  double budget_fraction;
  /**
   * Per-head budget in entries; 0 selects `budget_fraction`.
   */
  size_t budget_count;
  size_t window;
  size_t pool_kernel;
  /**
   * `KVT_ALLOCATION_*`
   */
  uint32_t allocation;
  /**
   * `KVT_SELECTOR_*`
   */
  uint32_t selector;
  double alpha;
  double epsilon;
  /**
   * `KVT_METRIC_*`
   */
  uint32_t metric;
  /**
   * `KVT_LOGIT_SCALE_*`
   */
  uint32_t logit_scale;
  /**
   * Adaptive allocation floor; used only when `has_floor` is nonzero.
   */
  size_t floor;
  uint8_t has_floor;
} KvtEvictionConfig;

typedef struct KvtHeadDims {
  uint32_t layer;
  uint32_t head;
  /**
   * Cache entries.
   */
  size_t entries;
  /**
   * Stored query rows.
   */
  size_t window_rows;
  size_t head_dim;
  size_t model_dim;
} KvtHeadDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *kvt_version(void);

/**
 * Message for the last failed call on this thread, or null after a
 * successful call. Valid until the next `kvt_*` call on the same thread.
 */
const char *kvt_last_error_message(void);

/**
 * Default eviction settings: 20% budget, window 32, kernel 7, flat
 * allocation, perturbation-constrained selector, alpha 0.5, epsilon 1e-4,
 * L1, scaled logits.
 */
struct KvtEvictionConfig kvt_eviction_config_default(void);

/**
 * Reads a HeadDump file into a new handle.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum KvtStatus kvt_head_read(const char *path, struct KvtHead **out);

/**
 * Builds a head from row-major `f32` arrays: `q` is `window_rows × head_dim`,
 * `keys` and `values` are `entries × head_dim`, `w_o` is
 * `head_dim × model_dim`. The data is copied.
 *
 * # Safety
 * Each array must hold the stated number of floats; `out` must be valid.
 */
enum KvtStatus kvt_head_from_raw(uint32_t layer,
                                 uint32_t head,
                                 size_t entries,
                                 size_t window_rows,
                                 size_t head_dim,
                                 size_t model_dim,
                                 const float *q,
                                 const float *keys,
                                 const float *values,
                                 const float *w_o,
                                 struct KvtHead **out);

/**
 * Writes a head as a HeadDump file (atomically).
 *
 * # Safety
 * `head` must come from this library; `path` must be nul-terminated.
 */
enum KvtStatus kvt_head_write(const struct KvtHead *head, const char *path);

/**
 * # Safety
 * `head` must come from this library and `out` must be valid.
 */
enum KvtStatus kvt_head_dims(const struct KvtHead *head, struct KvtHeadDims *out);

/**
 * Copies the row-major keys (`entries × head_dim` floats) into `out`.
 *
 * # Safety
 * `out` must hold `len` floats.
 */
enum KvtStatus kvt_head_copy_keys(const struct KvtHead *head, float *out, size_t len);

/**
 * Releases a head. Null is ignored.
 *
 * # Safety
 * `head` must come from this library and not be used afterwards.
 */
void kvt_head_free(struct KvtHead *head);

/**
 * Top-`budget` entries of `a`; writes 1 (kept) or 0 into `keep_out`.
 *
 * # Safety
 * `a` and `keep_out` must hold `n` elements.
 */
enum KvtStatus kvt_select_attention_only(const double *a,
                                         size_t n,
                                         size_t budget,
                                         uint8_t *keep_out);

/**
 * Two-stage perturbation-constrained selection. `keep_out` receives 1/0;
 * `stage_out`, if non-null, receives 0 (evicted), 1 or 2 (selecting stage).
 *
 * # Safety
 * `a`, `value_norms`, `keep_out` and a non-null `stage_out` must hold `n`
 * elements.
 */
enum KvtStatus kvt_select_perturbation_constrained(const double *a,
                                                   const double *value_norms,
                                                   size_t n,
                                                   size_t budget,
                                                   double alpha,
                                                   double epsilon,
                                                   uint8_t *keep_out,
                                                   uint8_t *stage_out);

/**
 * Actual output perturbation `‖(A − A')𝒱‖` for a keep mask; `projected` is
 * the row-major `n × d` matrix `V·W_O`.
 *
 * # Safety
 * `a` and `keep` must hold `n` elements, `projected` `n·d`, `out` one.
 */
enum KvtStatus kvt_output_perturbation(const double *a,
                                       const float *projected,
                                       size_t n,
                                       size_t d,
                                       const uint8_t *keep,
                                       uint32_t metric,
                                       double *out);

/**
 * Upper bound θ on the output perturbation of a keep mask.
 *
 * # Safety
 * `a`, `value_norms` and `keep` must hold `n` elements, `out` one.
 */
enum KvtStatus kvt_theta_bound(const double *a,
                               const double *value_norms,
                               size_t n,
                               const uint8_t *keep,
                               double *out);

/**
 * Evicts one head down to `budget` entries. `keep_out` (if non-null, `n`
 * bytes) receives the mask; `compacted_out` (if non-null) a new handle with
 * only the kept rows, to be released with `kvt_head_free`.
 *
 * # Safety
 * Pointers must be valid for the sizes above.
 */
enum KvtStatus kvt_evict_head(const struct KvtHead *head,
                              size_t budget,
                              const struct KvtEvictionConfig *config,
                              uint8_t *keep_out,
                              struct KvtHead **compacted_out);

/**
 * Evicts a layer of `count` heads sharing one cache length `n`. Per-head
 * budgets go to `budgets_out` (`count` values) and masks to `keep_out`
 * (`count × n` bytes, head-major).
 *
 * # Safety
 * `heads` must hold `count` valid handles; outputs must be sized as above.
 */
enum KvtStatus kvt_evict_layer(const struct KvtHead *const *heads,
                               size_t count,
                               const struct KvtEvictionConfig *config,
                               size_t *budgets_out,
                               uint8_t *keep_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KVTRIAGE_H */
