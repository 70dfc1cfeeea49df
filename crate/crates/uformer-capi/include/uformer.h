#ifndef UFORMER_H
#define UFORMER_H

/* Generated by cbindgen from uformer-capi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every C API call.
 */
typedef enum UformerStatus {
  UFORMER_STATUS_OK = 0,
  /**
   * Runtime failure (training/verification class errors).
   */
  UFORMER_STATUS_RUNTIME_ERROR = 1,
  /**
   * Bad configuration, shape, or file content.
   */
  UFORMER_STATUS_CONFIG_ERROR = 2,
  /**
   * A required pointer argument was null.
   */
  UFORMER_STATUS_NULL_ARGUMENT = 3,
  /**
   * A panic was caught at the boundary.
   */
  UFORMER_STATUS_PANIC = 4,
} UformerStatus;

/**
 * Opaque model handle (f32 weights).
 */
typedef struct UformerModel UformerModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *uformer_version(void);

/**
 * Message for the most recent failure on this thread. Valid until the next
 * API call from the same thread; never null.
 */
const char *uformer_last_error(void);

/**
 * Create a freshly initialized model from a configuration string
 * (`key = value` lines or `builtin:<name>`) and a seed.
 *
 * # Safety
 * `config` must be a NUL-terminated string and `out` a valid pointer.
 */
enum UformerStatus uformer_model_create(const char *config,
                                        uint64_t seed,
                                        struct UformerModel **out);

/**
 * Load a model from a checkpoint file written by this library or the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum UformerStatus uformer_model_load(const char *path, struct UformerModel **out);

/**
 * Write the model as a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum UformerStatus uformer_model_save(const struct UformerModel *model, const char *path);

/**
 * Release a model handle. Null is ignored.
 *
 * # Safety
 * `model` must have come from this library and not be freed twice.
 */
void uformer_model_free(struct UformerModel *model);

/**
 * Total learnable scalar count (0 for a null handle).
 *
 * # Safety
 * `model` must be a live handle or null.
 */
uint64_t uformer_model_param_count(const struct UformerModel *model);

/**
 * Smallest admissible input extent for this model (0 for null).
 *
 * # Safety
 * `model` must be a live handle or null.
 */
uint64_t uformer_model_min_extent(const struct UformerModel *model);

/**
 * Restore one image in a single forward pass. `input` and `output` are
 * row-major `[channels, height, width]` f32 buffers of identical extents.
 *
 * # Safety
 * Buffers must hold `channels * height * width` readable/writable floats.
 */
enum UformerStatus uformer_model_restore(const struct UformerModel *model,
                                         const float *input,
                                         size_t channels,
                                         size_t height,
                                         size_t width,
                                         float *output);

/**
 * Restore one image through overlap-tiled inference (values clamped to
 * [0, 1] like the CLI path).
 *
 * # Safety
 * Buffers must hold `channels * height * width` readable/writable floats.
 */
enum UformerStatus uformer_model_restore_tiled(const struct UformerModel *model,
                                               const float *input,
                                               size_t channels,
                                               size_t height,
                                               size_t width,
                                               size_t tile,
                                               size_t overlap,
                                               float *output);

/**
 * Analytic learnable-parameter total for a configuration string.
 *
 * # Safety
 * `config` must be NUL-terminated; `out_params` valid.
 */
enum UformerStatus uformer_count_params(const char *config, uint64_t *out_params);

/**
 * Analytic multiply-accumulate total at the given input resolution.
 *
 * # Safety
 * `config` must be NUL-terminated; `out_macs` valid.
 */
enum UformerStatus uformer_count_macs(const char *config,
                                      size_t height,
                                      size_t width,
                                      uint64_t *out_macs);

/**
 * PSNR between two equally sized buffers (+inf encoded as INFINITY).
 *
 * # Safety
 * Both buffers must hold `count` readable floats; `out_db` valid.
 */
enum UformerStatus uformer_psnr(const float *a,
                                const float *b,
                                size_t count,
                                double peak,
                                double *out_db);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UFORMER_H */
