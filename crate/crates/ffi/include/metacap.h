/* C interface for the metacap capture library. */

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes; nonzero values match the CLI exit-code contract.
 */
typedef enum McapStatus {
  MCAP_STATUS_OK = 0,
  /**
   * Bad arguments: null pointers, out-of-range indices, malformed paths.
   */
  MCAP_STATUS_USAGE = 2,
  /**
   * Invalid data: unreadable files, corrupt checkpoints, bad datasets.
   */
  MCAP_STATUS_DATA = 3,
  /**
   * Numerical failure inside the library.
   */
  MCAP_STATUS_NUMERICAL = 4,
} McapStatus;

/**
 * Opaque handle over a loaded checkpoint (field config, mode, weights).
 */
typedef struct McapCheckpoint McapCheckpoint;

/**
 * Opaque handle over an opened capture dataset.
 */
typedef struct McapDataset McapDataset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the calling thread's last error message. The pointer is valid
 * until the next failing call on this thread; never freed by the caller.
 */
const char *mcap_last_error(void);

/**
 * Loads a checkpoint file into a new handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum McapStatus mcap_checkpoint_load(const char *path, struct McapCheckpoint **out);

/**
 * Writes a checkpoint handle to a file.
 *
 * # Safety
 * `ckpt` must be a live handle; `path` a valid NUL-terminated string.
 */
enum McapStatus mcap_checkpoint_save(const struct McapCheckpoint *ckpt, const char *path);

/**
 * Frees a checkpoint handle; NULL is a no-op.
 *
 * # Safety
 * `ckpt` must be NULL or a handle not freed before.
 */
void mcap_checkpoint_free(struct McapCheckpoint *ckpt);

/**
 * Number of parameters in the checkpoint; 0 for NULL.
 *
 * # Safety
 * `ckpt` must be NULL or a live handle.
 */
uintptr_t mcap_checkpoint_param_count(const struct McapCheckpoint *ckpt);

/**
 * Interpolates two checkpoints in weight space: t = 0 gives `a`, t = 1
 * gives `b`. Layouts, field configs, and modes must match.
 *
 * # Safety
 * `a` and `b` must be live handles and `out` a valid pointer.
 */
enum McapStatus mcap_checkpoint_lerp(const struct McapCheckpoint *a,
                                     const struct McapCheckpoint *b,
                                     double t,
                                     struct McapCheckpoint **out);

/**
 * Opens and validates a dataset directory into a new handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum McapStatus mcap_dataset_open(const char *path, struct McapDataset **out);

/**
 * Frees a dataset handle; NULL is a no-op.
 *
 * # Safety
 * `ds` must be NULL or a handle not freed before.
 */
void mcap_dataset_free(struct McapDataset *ds);

/**
 * Number of cameras in the dataset; 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live handle.
 */
uintptr_t mcap_dataset_camera_count(const struct McapDataset *ds);

/**
 * Number of frames in the dataset; 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live handle.
 */
uintptr_t mcap_dataset_frame_count(const struct McapDataset *ds);

/**
 * Writes the image dimensions of one camera.
 *
 * # Safety
 * `ds` must be a live handle; `width` and `height` valid pointers.
 */
enum McapStatus mcap_dataset_camera_dims(const struct McapDataset *ds,
                                         uintptr_t camera,
                                         uint32_t *width,
                                         uint32_t *height);

/**
 * Checks every dataset invariant. `report` is always written: NULL when
 * the dataset is clean or unreadable, else a newline-separated violation
 * report (free with [`mcap_string_free`]) alongside a data status.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `report` a valid
 * pointer.
 */
enum McapStatus mcap_validate(const char *path, char **report);

/**
 * Frees a string returned by this library; NULL is a no-op.
 *
 * # Safety
 * `s` must be NULL or a string returned by this library, freed once.
 */
void mcap_string_free(char *s);

/**
 * Renders one dataset view from a checkpoint. `rgb` receives
 * width*height*3 doubles in row-major RGB order; `mask` (optional, may be
 * NULL) receives width*height doubles. Query sizes with
 * [`mcap_dataset_camera_dims`]. `samples_per_ray` 0 uses the default.
 *
 * # Safety
 * `ckpt` and `ds` must be live handles; `rgb` (and `mask` if non-NULL)
 * must point to buffers of the documented sizes.
 */
enum McapStatus mcap_render(const struct McapCheckpoint *ckpt,
                            const struct McapDataset *ds,
                            uintptr_t frame,
                            uintptr_t camera,
                            uintptr_t samples_per_ray,
                            uint64_t seed,
                            double *rgb,
                            double *mask);

/**
 * Extracts the zero surface to an OBJ file. With `ds` non-NULL and
 * `frame` >= 0 the surface is posed into that frame; otherwise it stays
 * in canonical space. An empty surface still writes a (vertex-free) file
 * and returns OK.
 *
 * # Safety
 * `ckpt` must be a live handle; `ds` NULL or a live handle; `out_path` a
 * valid NUL-terminated string.
 */
enum McapStatus mcap_extract(const struct McapCheckpoint *ckpt,
                             const struct McapDataset *ds,
                             int64_t frame,
                             uintptr_t resolution,
                             const char *out_path);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus
