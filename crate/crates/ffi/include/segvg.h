#ifndef SEGVG_H
#define SEGVG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. The first five match the command-line exit codes.
typedef enum SegvgStatus {
  SEGVG_STATUS_OK = 0,
  SEGVG_STATUS_FAILURE = 1,
  SEGVG_STATUS_CONFIG = 2,
  SEGVG_STATUS_NUMERIC = 3,
  SEGVG_STATUS_CHECKPOINT = 4,
  SEGVG_STATUS_NULL_POINTER = 5,
  SEGVG_STATUS_INVALID_ARGUMENT = 6,
  SEGVG_STATUS_PANIC = 7,
} SegvgStatus;

// Loaded configuration and weights.
typedef struct SegvgModel SegvgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Thread-local description of the last failure; empty after a success.
// Valid until the next call on the same thread.
const char *segvg_last_error(void);

// Library version as a static NUL-terminated string.
const char *segvg_version(void);

// Builds the model described by the JSON run configuration at
// `config_path` (NULL for defaults) and fills it from `checkpoint_path`.
//
// # Safety
// Paths must be NUL-terminated strings or NULL where allowed; `out` must
// be writable.
enum SegvgStatus segvg_model_load(const char *config_path,
                                  const char *checkpoint_path,
                                  struct SegvgModel **out);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from [`segvg_model_load`] and not be used afterwards.
void segvg_model_free(struct SegvgModel *model);

// Expected image size: writes channels (3), height and width.
//
// # Safety
// All pointers must be valid.
enum SegvgStatus segvg_model_image_shape(const struct SegvgModel *model,
                                         size_t *channels,
                                         size_t *height,
                                         size_t *width);

// Grounds `text` in a planar RGB image (`3 * height * width` floats in
// `[0, 1]`). Writes the center/size box to `out_box[0..4]` and the
// confidence to `out_confidence`.
//
// # Safety
// `image` must point to `image_len` floats; `out_box` to 4 writable
// doubles.
enum SegvgStatus segvg_predict(const struct SegvgModel *model,
                               const float *image,
                               size_t image_len,
                               const char *text,
                               double *out_box,
                               double *out_confidence);

// Token ids and padding mask (1 = padding) for `text`, `len` entries each.
//
// # Safety
// `ids` and `mask` must each hold `len` writable elements.
enum SegvgStatus segvg_tokenize(const char *text, size_t len, uint32_t *ids, uint8_t *mask);

// IoU of two center/size boxes.
//
// # Safety
// `a` and `b` must point to 4 doubles each.
enum SegvgStatus segvg_iou(const double *a, const double *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEGVG_H */
