#ifndef DRI_H
#define DRI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Zero is success.
typedef enum DriStatus {
  DRI_STATUS_OK = 0,
  DRI_STATUS_CONFIG = 1,
  DRI_STATUS_PLAN = 2,
  DRI_STATUS_CONTRACT = 3,
  DRI_STATUS_STATE = 4,
  DRI_STATUS_DIMENSION = 5,
  DRI_STATUS_INPUT = 6,
  DRI_STATUS_DATA = 7,
  DRI_STATUS_PARSE = 8,
  DRI_STATUS_PROTOCOL = 9,
  DRI_STATUS_IO = 10,
  DRI_STATUS_NUMERIC = 11,
  DRI_STATUS_NULL_ARGUMENT = 12,
  DRI_STATUS_INVALID_UTF8 = 13,
  DRI_STATUS_PANIC = 14,
} DriStatus;

// A restored checkpoint: configuration, model graph and weights.
typedef struct DriModel DriModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL after a success.
// The pointer stays valid until the next call on the same thread.
const char *dri_last_error(void);

// Library version as a static NUL-terminated string.
const char *dri_version(void);

// Loads a checkpoint written by `dri train` into a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum DriStatus dri_model_load(const char *path, struct DriModel **out);

// Releases a handle. NULL is ignored.
//
// # Safety
// `model` must come from [`dri_model_load`] and not be used afterwards.
void dri_model_free(struct DriModel *model);

// Input geometry `channels × height × width` and embedding width.
//
// # Safety
// `model` must be a live handle; the out pointers must be writable.
enum DriStatus dri_model_shape(const struct DriModel *model,
                               size_t *channels,
                               size_t *height,
                               size_t *width,
                               size_t *embedding_dim);

// Whether the model reads `(size, aspect)` metadata per image.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum DriStatus dri_model_uses_metadata(const struct DriModel *model, bool *out);

// Number of trainable parameters the checkpoint was fine-tuned with.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum DriStatus dri_model_trainable_params(const struct DriModel *model, size_t *out);

// Embeds `count` images laid out as `[count, C, H, W]` floats into
// `out[count * D]`. `size` and `aspect` hold one value per image and may
// be NULL when the model reads no metadata.
//
// # Safety
// `pixels` must hold `count*C*H*W` floats, `out` must have room for
// `out_len` floats, and `size`/`aspect` (when non-NULL) `count` doubles.
enum DriStatus dri_model_embed(const struct DriModel *model,
                               const float *pixels,
                               size_t count,
                               const double *size,
                               const double *aspect,
                               float *out,
                               size_t out_len);

// Closed-form trainable parameter count for a run configuration given as
// `key = value` lines (empty for the defaults).
//
// # Safety
// `config` must be a NUL-terminated string and `out` writable.
enum DriStatus dri_param_count(const char *config, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRI_H */
