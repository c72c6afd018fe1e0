#ifndef SPINECADE_H
#define SPINECADE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpcStatus {
  SPC_STATUS_OK = 0,
  SPC_STATUS_NULL_POINTER = 1,
  SPC_STATUS_INVALID_ARGUMENT = 2,
  SPC_STATUS_IO = 3,
  SPC_STATUS_MALFORMED = 4,
  SPC_STATUS_CONFIG_INVALID = 5,
  SPC_STATUS_MISSING_ARTIFACT = 6,
  SPC_STATUS_LOCKED = 7,
  SPC_STATUS_FAILED = 8,
  SPC_STATUS_PANIC = 9,
} SpcStatus;

typedef enum SpcStrategy {
  SPC_STRATEGY_ORIGINAL = 0,
  SPC_STRATEGY_MIRRORED = 1,
  SPC_STRATEGY_ORIENTED = 2,
} SpcStrategy;

typedef struct SpcEdgeMap SpcEdgeMap;

typedef struct SpcModel SpcModel;

typedef struct SpcProbabilityMap SpcProbabilityMap;

typedef struct SpcVolume SpcVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *spc_version(void);

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next `spc_*` call on the same thread.
 */
const char *spc_last_error(void);

/**
 * Load a MetaImage volume from its `.mhd` header.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SpcStatus spc_volume_load(const char *path, struct SpcVolume **out);

/**
 * # Safety
 * `v` must come from `spc_volume_load`; `dims` and `spacing` may be null or point to 3 elements.
 */
enum SpcStatus spc_volume_geometry(const struct SpcVolume *v, size_t *dims, double *spacing);

/**
 * # Safety
 * `v` must be null or a handle not yet freed.
 */
void spc_volume_free(struct SpcVolume *v);

/**
 * Edge candidates of `image` inside `mask`.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum SpcStatus spc_edges_extract(const struct SpcVolume *image,
                                 const struct SpcVolume *mask,
                                 double threshold_percentile,
                                 struct SpcEdgeMap **out);

/**
 * Number of edge voxels; 0 for a null handle.
 *
 * # Safety
 * `e` must be null or live.
 */
size_t spc_edges_len(const struct SpcEdgeMap *e);

/**
 * Voxel index (x, y, z) of edge voxel `i`.
 *
 * # Safety
 * `e` must be live; `index` must point to 3 writable elements.
 */
enum SpcStatus spc_edges_get(const struct SpcEdgeMap *e, size_t i, size_t *index);

/**
 * # Safety
 * `e` must be null or a handle not yet freed.
 */
void spc_edges_free(struct SpcEdgeMap *e);

/**
 * Load a trained checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SpcStatus spc_model_load(const char *path, struct SpcModel **out);

/**
 * # Safety
 * `m` must be null or a handle not yet freed.
 */
void spc_model_free(struct SpcModel *m);

/**
 * Fracture probability for every edge voxel, with default sampler settings.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum SpcStatus spc_predict(const struct SpcModel *model,
                           const struct SpcVolume *image,
                           const struct SpcEdgeMap *edges,
                           enum SpcStrategy strategy,
                           struct SpcProbabilityMap **out);

/**
 * # Safety
 * `p` must be null or live.
 */
size_t spc_probability_map_len(const struct SpcProbabilityMap *p);

/**
 * Entry `i`: voxel index (x, y, z) and probability.
 *
 * # Safety
 * `p` must be live; `index` must point to 3 writable elements; `prob` must be writable.
 */
enum SpcStatus spc_probability_map_get(const struct SpcProbabilityMap *p,
                                       size_t i,
                                       size_t *index,
                                       double *prob);

/**
 * # Safety
 * `p` must be null or a handle not yet freed.
 */
void spc_probability_map_free(struct SpcProbabilityMap *p);

/**
 * Area under the ROC curve; `labels[i]` nonzero marks a positive.
 *
 * # Safety
 * `scores` and `labels` must point to `n` elements; `auc` must be writable.
 */
enum SpcStatus spc_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *auc);

/**
 * Run every pipeline stage for the configured strategy.
 * `overrides` holds `n_overrides` strings of the form `key=value`.
 * On success `auc` (if non-null) receives the test-set ROC AUC.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `overrides` must point to
 * `n_overrides` NUL-terminated strings (or be null when `n_overrides` is 0).
 */
enum SpcStatus spc_run_all(const char *config_path,
                           const char *const *overrides,
                           size_t n_overrides,
                           double *auc);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPINECADE_H */
