#ifndef WSLOC_H
#define WSLOC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WslocStatus {
  WSLOC_STATUS_OK = 0,
  WSLOC_STATUS_NULL_POINTER = 1,
  WSLOC_STATUS_INVALID_ARGUMENT = 2,
  WSLOC_STATUS_IO = 3,
  WSLOC_STATUS_FORMAT = 4,
  WSLOC_STATUS_SHAPE = 5,
  WSLOC_STATUS_NON_FINITE = 6,
  WSLOC_STATUS_BUFFER_TOO_SMALL = 7,
  WSLOC_STATUS_PANIC = 8,
} WslocStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct WslocModel WslocModel;

/**
 * Corners in pixels, `x1 < x2`, `y1 < y2`.
 */
typedef struct WslocBox {
  double x1;
  double y1;
  double x2;
  double y2;
} WslocBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *wsloc_last_error(void);

/**
 * Loads a checkpoint and its `.meta` sidecar.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum WslocStatus wsloc_model_load(const char *path, struct WslocModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`wsloc_model_load`] and not be used afterwards.
 */
void wsloc_model_free(struct WslocModel *model);

/**
 * Class count, input channels (raster or feature) and feature stride.
 * `precomputed` is 1 when the model takes feature maps instead of rasters.
 *
 * # Safety
 * `model` must be a live handle; outputs must be writable.
 */
enum WslocStatus wsloc_model_info(const struct WslocModel *model,
                                  size_t *classes,
                                  size_t *input_channels,
                                  size_t *stride,
                                  int32_t *precomputed);

/**
 * Scores `n_rois` boxes on a planar `channels x height x width` raster with
 * values in `[0, 1]`. Writes the `n_rois x classes` row-major fused scores
 * into `scores` and, when `image_scores` is non-null, the `classes`
 * image-level scores.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum WslocStatus wsloc_model_score_image(const struct WslocModel *model,
                                         const double *pixels,
                                         size_t channels,
                                         size_t height,
                                         size_t width,
                                         const struct WslocBox *rois,
                                         size_t n_rois,
                                         double *scores,
                                         size_t scores_len,
                                         double *image_scores);

/**
 * As [`wsloc_model_score_image`] for a planar `channels x height x width`
 * feature map whose cells cover `stride` pixels.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum WslocStatus wsloc_model_score_features(const struct WslocModel *model,
                                            const double *features,
                                            size_t channels,
                                            size_t height,
                                            size_t width,
                                            size_t stride,
                                            const struct WslocBox *rois,
                                            size_t n_rois,
                                            double *scores,
                                            size_t scores_len,
                                            double *image_scores);

/**
 * Intersection over union of two boxes.
 *
 * # Safety
 * `a`, `b` must be readable and `out` writable.
 */
enum WslocStatus wsloc_iou(const struct WslocBox *a, const struct WslocBox *b, double *out);

/**
 * Greedy non-maximum suppression. Writes the kept indices, best score
 * first, into `keep` (capacity `n`) and their count into `n_keep`.
 *
 * # Safety
 * `boxes` and `scores` must hold `n` values, `keep` room for `n`.
 */
enum WslocStatus wsloc_nms(const struct WslocBox *boxes,
                           const double *scores,
                           size_t n,
                           double threshold,
                           size_t *keep,
                           size_t *n_keep);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WSLOC_H */
