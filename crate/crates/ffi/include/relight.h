#ifndef RELIGHT_H
#define RELIGHT_H

/* Generated by cbindgen from the relight-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a C API call.
 */
typedef enum RelightStatus {
  /**
   * The call succeeded.
   */
  RELIGHT_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  RELIGHT_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  RELIGHT_STATUS_INVALID_UTF8 = 2,
  /**
   * The filesystem said no: missing file, unwritable path.
   */
  RELIGHT_STATUS_IO = 3,
  /**
   * The image could not be decoded or encoded.
   */
  RELIGHT_STATUS_BAD_IMAGE = 4,
  /**
   * The checkpoint is malformed or inconsistent.
   */
  RELIGHT_STATUS_BAD_CHECKPOINT = 5,
  /**
   * Inputs failed validation (shapes, dimensions, config).
   */
  RELIGHT_STATUS_INVALID_INPUT = 6,
  /**
   * An internal panic was caught.
   */
  RELIGHT_STATUS_PANIC = 7,
} RelightStatus;

/**
 * A loaded model: trained parameters plus the frozen segmentation backend
 * reconstructed from the checkpoint's seeds. Opaque to C callers.
 */
typedef struct RelightEnhancer RelightEnhancer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint and writes a handle to `out`. The handle owns its
 * model and must be released with [`relight_enhancer_free`].
 */
enum RelightStatus relight_enhancer_load(const char *checkpoint_path, struct RelightEnhancer **out);

/**
 * Releases a handle. NULL is a no-op. The handle must not be used again.
 */
void relight_enhancer_free(struct RelightEnhancer *handle);

/**
 * Number of trained scalars in the loaded model, 0 for NULL.
 */
uint64_t relight_enhancer_parameter_count(const struct RelightEnhancer *handle);

/**
 * Enhances the image at `input_path` and writes a PNG to `output_path`.
 * Input dimensions are unrestricted; the image is padded internally.
 */
enum RelightStatus relight_enhancer_enhance_file(const struct RelightEnhancer *handle,
                                                 const char *input_path,
                                                 const char *output_path);

/**
 * Splits the image at `input_path` into its illumination and reflectance
 * maps, written as PNGs. Needs no model.
 */
enum RelightStatus relight_decompose_file(const char *input_path,
                                          const char *illumination_path,
                                          const char *reflectance_path);

/**
 * Description of the most recent failure on this thread. Valid until the
 * next API call from the same thread; never NULL.
 */
const char *relight_last_error(void);

/**
 * Static name for a status code.
 */
const char *relight_status_message(enum RelightStatus status);

/**
 * Library version as a static string.
 */
const char *relight_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RELIGHT_H */
