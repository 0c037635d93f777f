#ifndef SDLSEG_H
#define SDLSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum SdlStatus {
  SDL_STATUS_OK = 0,
  SDL_STATUS_NULL_POINTER = 1,
  SDL_STATUS_INVALID_ARGUMENT = 2,
  SDL_STATUS_IO = 3,
  SDL_STATUS_FORMAT = 4,
  SDL_STATUS_GEOMETRY = 5,
  SDL_STATUS_SHAPE = 6,
  SDL_STATUS_EMPTY = 7,
  SDL_STATUS_NUMERIC = 8,
  SDL_STATUS_PANIC = 9,
} SdlStatus;

/**
 * Binary mask with its grid.
 */
typedef struct SdlMask SdlMask;

/**
 * A trained network loaded from a checkpoint.
 */
typedef struct SdlModel SdlModel;

/**
 * Image of `f32` voxels with its grid.
 */
typedef struct SdlVolume SdlVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes, without
 * the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t sdl_last_error_message(char *buf, size_t len);

/**
 * Creates a volume from `dims[0] * dims[1] * dims[2]` voxels.
 *
 * # Safety
 * `dims` and `spacing_mm` point to 3 values, `data` to the full voxel
 * buffer, `out` to a writable handle slot.
 */
enum SdlStatus sdl_volume_new(const size_t *dims,
                              const double *spacing_mm,
                              const float *data,
                              struct SdlVolume **out_volume);

/**
 * Reads a volume file.
 *
 * # Safety
 * `path` is a NUL-terminated string, `out_volume` a writable handle slot.
 */
enum SdlStatus sdl_volume_read(const char *path, struct SdlVolume **out_volume);

/**
 * Writes a volume file.
 *
 * # Safety
 * `volume` is a live handle, `path` a NUL-terminated string.
 */
enum SdlStatus sdl_volume_write(const struct SdlVolume *volume, const char *path);

/**
 * Writes the grid size into `dims[3]`.
 *
 * # Safety
 * `volume` is a live handle, `dims` points to 3 writable values.
 */
enum SdlStatus sdl_volume_dims(const struct SdlVolume *volume, size_t *dims);

/**
 * Copies the voxels into `buf`, which must hold exactly the voxel count.
 *
 * # Safety
 * `volume` is a live handle, `buf` points to `len` writable values.
 */
enum SdlStatus sdl_volume_copy_data(const struct SdlVolume *volume, float *buf, size_t len);

/**
 * Releases a volume. Null is ignored.
 *
 * # Safety
 * `volume` is null or a handle not yet freed.
 */
void sdl_volume_free(struct SdlVolume *volume);

/**
 * Creates a mask; any non-zero byte is foreground.
 *
 * # Safety
 * As for [`sdl_volume_new`].
 */
enum SdlStatus sdl_mask_new(const size_t *dims,
                            const double *spacing_mm,
                            const uint8_t *data,
                            struct SdlMask **out_mask);

/**
 * Reads a mask file.
 *
 * # Safety
 * `path` is a NUL-terminated string, `out_mask` a writable handle slot.
 */
enum SdlStatus sdl_mask_read(const char *path, struct SdlMask **out_mask);

/**
 * Writes a mask file.
 *
 * # Safety
 * `mask` is a live handle, `path` a NUL-terminated string.
 */
enum SdlStatus sdl_mask_write(const struct SdlMask *mask, const char *path);

/**
 * Number of foreground voxels.
 *
 * # Safety
 * `mask` is a live handle, `count` a writable value.
 */
enum SdlStatus sdl_mask_count(const struct SdlMask *mask, size_t *count);

/**
 * Copies the 0/1 voxels into `buf`, which must hold exactly the voxel count.
 *
 * # Safety
 * `mask` is a live handle, `buf` points to `len` writable bytes.
 */
enum SdlStatus sdl_mask_copy_data(const struct SdlMask *mask, uint8_t *buf, size_t len);

/**
 * Releases a mask. Null is ignored.
 *
 * # Safety
 * `mask` is null or a handle not yet freed.
 */
void sdl_mask_free(struct SdlMask *mask);

/**
 * Saliency map of a CT in HU with default marker settings and the given
 * Gaussian width (voxels). `max_cues < 0` keeps every cue, otherwise the
 * largest `max_cues` cues are used. `out_cue_count` may be null.
 *
 * # Safety
 * `ct` and `breast` are live handles; `out_saliency` is a writable slot.
 */
enum SdlStatus sdl_saliency(const struct SdlVolume *ct,
                            const struct SdlMask *breast,
                            double sigma,
                            int64_t max_cues,
                            struct SdlVolume **out_saliency,
                            size_t *out_cue_count);

/**
 * Loads a network checkpoint.
 *
 * # Safety
 * `path` is a NUL-terminated string, `out_model` a writable handle slot.
 */
enum SdlStatus sdl_model_load(const char *path, struct SdlModel **out_model);

/**
 * Number of input channels: 1 for CT only, 2 for CT plus saliency.
 *
 * # Safety
 * `model` is a live handle, `channels` a writable value.
 */
enum SdlStatus sdl_model_in_channels(const struct SdlModel *model, size_t *channels);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void sdl_model_free(struct SdlModel *model);

/**
 * Foreground probability and thresholded mask for a normalized CT. Pass the
 * saliency map for two-channel models and null for CT-only models.
 * `out_probability` may be null.
 *
 * # Safety
 * `model` and `ct_norm` are live handles, `saliency` is null or live,
 * `out_mask` is a writable slot.
 */
enum SdlStatus sdl_predict(const struct SdlModel *model,
                           const struct SdlVolume *ct_norm,
                           const struct SdlVolume *saliency,
                           float threshold,
                           struct SdlVolume **out_probability,
                           struct SdlMask **out_mask);

/**
 * Voxel-wise majority vote of `n` masks; ties are background.
 *
 * # Safety
 * `masks` points to `n` live handles, `out_mask` is a writable slot.
 */
enum SdlStatus sdl_majority_vote(const struct SdlMask *const *masks,
                                 size_t n,
                                 struct SdlMask **out_mask);

/**
 * Dice similarity coefficient; 1 when both masks are empty.
 *
 * # Safety
 * `a` and `b` are live handles, `value` a writable value.
 */
enum SdlStatus sdl_dsc(const struct SdlMask *a, const struct SdlMask *b, double *value);

/**
 * 95th percentile symmetric surface distance in mm. Fails with
 * `Empty` when either mask is empty.
 *
 * # Safety
 * As for [`sdl_dsc`].
 */
enum SdlStatus sdl_hd95(const struct SdlMask *a, const struct SdlMask *b, double *value);

/**
 * Average symmetric surface distance in mm. Fails with `Empty` when either
 * mask is empty.
 *
 * # Safety
 * As for [`sdl_dsc`].
 */
enum SdlStatus sdl_asd(const struct SdlMask *a, const struct SdlMask *b, double *value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SDLSEG_H */
