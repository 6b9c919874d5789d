#ifndef ADVERX_H
#define ADVERX_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum AdverxStatus {
  ADVERX_STATUS_OK = 0,
  ADVERX_STATUS_NULL_POINTER = 1,
  ADVERX_STATUS_INVALID_ARGUMENT = 2,
  ADVERX_STATUS_IO = 3,
  /**
   * Unreadable, corrupt or mismatched model archive.
   */
  ADVERX_STATUS_ARCHIVE = 4,
  /**
   * Unreadable or unsupported image data.
   */
  ADVERX_STATUS_DATA = 5,
  /**
   * Wrong sizes, too few patches, or a ROI too small for a patch.
   */
  ADVERX_STATUS_SHAPE = 6,
  ADVERX_STATUS_NUMERICAL = 7,
  ADVERX_STATUS_INTERNAL = 8,
  ADVERX_STATUS_PANIC = 9,
} AdverxStatus;

/**
 * Opaque model handle.
 */
typedef struct AdverxModel AdverxModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *adverx_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *adverx_last_error(void);

/**
 * Load a full or discriminator-only archive.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AdverxStatus adverx_model_load(const char *path, struct AdverxModel **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`adverx_model_load`] and not be used afterwards.
 */
void adverx_model_free(struct AdverxModel *model);

/**
 * Side length of the square patches the model expects.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum AdverxStatus adverx_model_patch_size(const struct AdverxModel *model, size_t *out);

/**
 * Number of discriminator parameters.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum AdverxStatus adverx_model_discriminator_params(const struct AdverxModel *model, size_t *out);

/**
 * Per-patch OOD scores (`1 - P(real)`) for `k` row-major patches of
 * `s * s` values in `[0, 1]`, evaluated as one batch.
 *
 * # Safety
 * `patches` must hold `k * s * s` floats and `out_scores` room for `k`
 * doubles, where `s` is the model's patch size.
 */
enum AdverxStatus adverx_score_patches(const struct AdverxModel *model,
                                       const float *patches,
                                       size_t k,
                                       double *out_scores);

/**
 * Image-level OOD score of a row-major grayscale image with values in
 * `[0, 1]`: the mean over `k` patches drawn from the central region.
 *
 * # Safety
 * `pixels` must hold `height * width` floats and `out` be valid.
 */
enum AdverxStatus adverx_score_image(const struct AdverxModel *model,
                                     const float *pixels,
                                     size_t height,
                                     size_t width,
                                     size_t k,
                                     double margin,
                                     uint64_t seed,
                                     double *out);

/**
 * Load an image file (PNG, 16-bit PNG or DICOM) and score it like
 * [`adverx_score_image`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` be valid.
 */
enum AdverxStatus adverx_score_file(const struct AdverxModel *model,
                                    const char *path,
                                    size_t k,
                                    double margin,
                                    uint64_t seed,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVERX_H */
