#ifndef VIG_H
#define VIG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of an API call.
 */
typedef enum {
  VIG_STATUS_OK = 0,
  VIG_STATUS_NULL_POINTER = 1,
  VIG_STATUS_INVALID_ARGUMENT = 2,
  VIG_STATUS_CONFIG = 3,
  VIG_STATUS_DIMENSION = 4,
  VIG_STATUS_INDEX = 5,
  VIG_STATUS_FORMAT = 6,
  VIG_STATUS_IO = 7,
  /**
   * An output buffer was too small; the required length was still written.
   */
  VIG_STATUS_BUFFER_TOO_SMALL = 8,
  VIG_STATUS_NON_FINITE = 9,
  VIG_STATUS_RUNTIME = 10,
  VIG_STATUS_PANIC = 11,
} VigStatus;

/**
 * Opaque model handle.
 */
typedef struct VigModel VigModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none failed yet.
 *
 * The string stays valid until the next failing call on the same thread.
 */
const char *vig_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vig_version(void);

/**
 * Build a named preset with weights drawn from `seed`.
 *
 * # Safety
 *
 * `name` must be a NUL-terminated string and `out` valid for a pointer write.
 */
VigStatus vig_model_from_preset(const char *name, uint64_t seed, VigModel **out);

/**
 * Build a model from a JSON config document (a preset plus overrides, or a full config).
 *
 * # Safety
 *
 * `json` must be a NUL-terminated string and `out` valid for a pointer write.
 */
VigStatus vig_model_from_config(const char *json, uint64_t seed, VigModel **out);

/**
 * Load a checkpoint archive together with its `.json` manifest.
 *
 * # Safety
 *
 * `path` must be a NUL-terminated string and `out` valid for a pointer write.
 */
VigStatus vig_model_load(const char *path, VigModel **out);

/**
 * Write a checkpoint archive and its manifest.
 *
 * # Safety
 *
 * `model` must come from this library and `path` be a NUL-terminated string.
 */
VigStatus vig_model_save(const VigModel *model, const char *path);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 *
 * `model` must be null or a live handle from this library, not used afterwards.
 */
void vig_model_free(VigModel *model);

/**
 * Input height, width and number of output classes.
 *
 * # Safety
 *
 * `model` must be a live handle; the out pointers must be valid for writes.
 */
VigStatus vig_model_shape(const VigModel *model,
                          size_t *height,
                          size_t *width,
                          size_t *num_classes);

/**
 * Number of trainable parameters.
 *
 * # Safety
 *
 * `model` must be a live handle and `out` valid for a write.
 */
VigStatus vig_model_param_count(const VigModel *model, uint64_t *out);

/**
 * Multiply-accumulates of one forward pass at `height` × `width`.
 *
 * # Safety
 *
 * `model` must be a live handle and `out` valid for a write.
 */
VigStatus vig_model_mac_count(const VigModel *model, size_t height, size_t width, uint64_t *out);

/**
 * Eval-mode logits for `batch` normalized images laid out `[batch][height][width][3]`.
 *
 * `logits` receives `batch × num_classes` values.
 *
 * # Safety
 *
 * `images` must hold `batch·height·width·3` floats and `logits` room for `logits_len`.
 */
VigStatus vig_model_predict(const VigModel *model,
                            const float *images,
                            size_t batch,
                            float *logits,
                            size_t logits_len);

/**
 * Neighbor table of the graph built at the 1-based block `layer` for one image.
 *
 * Row `i` of the `num_nodes × k` table lists the neighbors of node `i` nearest first.
 * When `neighbors_len` is too small nothing is copied, `num_nodes` and `k` are still
 * written, and `VIG_STATUS_BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 *
 * `image` must hold `height·width·3` floats, `neighbors` room for `neighbors_len`
 * values (it may be null when `neighbors_len` is 0), and the out pointers be writable.
 */
VigStatus vig_model_graph(const VigModel *model,
                          const float *image,
                          size_t layer,
                          uint32_t *neighbors,
                          size_t neighbors_len,
                          size_t *num_nodes,
                          size_t *k);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIG_H */
