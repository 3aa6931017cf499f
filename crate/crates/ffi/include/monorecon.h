#ifndef MONORECON_H
#define MONORECON_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum MrStatus {
  MrOk = 0,
  /**
   * A pointer argument was null or a path was not valid UTF-8.
   */
  MrBadArgument = 1,
  /**
   * File missing, unreadable or malformed.
   */
  MrIoError = 2,
  /**
   * Numerical failure while rendering.
   */
  MrComputeError = 3,
  /**
   * Unexpected internal failure.
   */
  MrInternal = 4,
} MrStatus;

/**
 * A trained model bound to its conditioning frame: ready to render views.
 */
typedef struct MrModel MrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *mr_last_error(void);

/**
 * Library version as a static string.
 */
const char *mr_version(void);

/**
 * Load a checkpoint plus the dataset holding its conditioning frame.
 * On success writes an owned handle to `out`; release with `mr_model_free`.
 *
 * # Safety
 * `ckpt_path` and `data_dir` must be valid NUL-terminated strings and `out`
 * a valid pointer.
 */
enum MrStatus mr_model_load(const char *ckpt_path, const char *data_dir, struct MrModel **out);

/**
 * Release a handle from `mr_model_load`. Null is a no-op.
 *
 * # Safety
 * `model` must be a live handle from `mr_model_load` or null; it must not
 * be used again afterwards.
 */
void mr_model_free(struct MrModel *model);

/**
 * Image width and height in pixels.
 *
 * # Safety
 * All pointers must be valid; `model` must be a live handle.
 */
enum MrStatus mr_image_size(const struct MrModel *model, uintptr_t *width, uintptr_t *height);

/**
 * Render a depth map from a pose relative to the conditioning frame:
 * `forward_m` meters along the optical axis, then `yaw_deg` degrees of yaw.
 * Writes width*height doubles (row-major, meters; 0 marks rays that hit
 * nothing) into `out`, which must hold at least `out_len` doubles.
 *
 * # Safety
 * `model` must be a live handle; `out` must point to `out_len` writable
 * doubles.
 */
enum MrStatus mr_render_depth(const struct MrModel *model,
                              double forward_m,
                              double yaw_deg,
                              double *out,
                              uintptr_t out_len);

/**
 * Render an RGB image the same way. Writes width*height*3 doubles in [0,1],
 * row-major, channel-interleaved.
 *
 * # Safety
 * Same contract as `mr_render_depth`.
 */
enum MrStatus mr_render_image(const struct MrModel *model,
                              double forward_m,
                              double yaw_deg,
                              double *out,
                              uintptr_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MONORECON_H */
