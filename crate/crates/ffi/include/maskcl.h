#ifndef MASKCL_H
#define MASKCL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CmfStatus {
  CMF_STATUS_OK = 0,
  CMF_STATUS_NULL_POINTER = 1,
  CMF_STATUS_INVALID_ARGUMENT = 2,
  CMF_STATUS_SHAPE = 3,
  CMF_STATUS_FORMAT = 4,
  CMF_STATUS_IO = 5,
  CMF_STATUS_NUMERIC = 6,
  CMF_STATUS_INTEGRITY = 7,
  CMF_STATUS_CAPACITY = 8,
  CMF_STATUS_PANIC = 9,
} CmfStatus;

/*
 Opaque trained model.
 */
typedef struct CmfModel CmfModel;

/*
 Opaque panoptic quality accumulator.
 */
typedef struct CmfPqStats CmfPqStats;

/*
 Shape information of a loaded model.
 */
typedef struct CmfModelInfo {
  size_t channels;
  size_t height;
  size_t width;
  size_t queries;
  /*
   Classifier rows including "no object" at row 0.
   */
  size_t outputs;
  /*
   1 when masks are a per-pixel softmax over queries.
   */
  uint8_t softmax_masks;
} CmfModelInfo;

/*
 Counts for one class. Ratios are NaN where undefined.
 */
typedef struct CmfClassPq {
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  double iou_sum;
  double pq;
  double sq;
  double rq;
} CmfClassPq;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer is
 valid until the next failing call on the same thread.
 */
const char *cmf_last_error(void);

/*
 Decodes a checkpoint held in memory.

 # Safety
 `bytes` must point to `len` readable bytes and `out` to writable storage
 for one pointer.
 */
enum CmfStatus cmf_model_from_bytes(const uint8_t *bytes, size_t len, struct CmfModel **out);

/*
 Reads and decodes a checkpoint file.

 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
enum CmfStatus cmf_model_load(const char *path, struct CmfModel **out);

/*
 # Safety
 `model` must come from a load call and not have been freed. Null is a no-op.
 */
void cmf_model_free(struct CmfModel *model);

/*
 # Safety
 `model` must be a live handle and `info` writable.
 */
enum CmfStatus cmf_model_info(const struct CmfModel *model, struct CmfModelInfo *info);

/*
 Class id of each classifier row after "no object"; `len` must equal
 `outputs - 1`.

 # Safety
 `ids` must have room for `len` values.
 */
enum CmfStatus cmf_model_classes(const struct CmfModel *model, uint16_t *ids, size_t len);

/*
 Runs one image through the model.

 `image` is channel-major, `channels * height * width` values.
 `class_probs` receives `queries * outputs` values, row-major by query,
 and `masks` receives `queries * height * width` values.

 # Safety
 Every pointer must reference the stated number of elements.
 */
enum CmfStatus cmf_model_forward(const struct CmfModel *model,
                                 const double *image,
                                 size_t image_len,
                                 double *class_probs,
                                 size_t class_probs_len,
                                 double *masks,
                                 size_t masks_len);

/*
 Minimum-cost assignment of every row of a `rows x cols` cost matrix
 (row-major, `rows <= cols`) to a distinct column. Ties resolve to the
 lexicographically smallest assignment.

 # Safety
 `cost` must hold `rows * cols` values and `assignment` room for `rows`.
 */
enum CmfStatus cmf_hungarian(const double *cost, size_t rows, size_t cols, size_t *assignment);

struct CmfPqStats *cmf_pq_new(void);

/*
 # Safety
 `stats` must come from [`cmf_pq_new`]. Null is a no-op.
 */
void cmf_pq_free(struct CmfPqStats *stats);

/*
 Adds one image. Each id map holds `height * width` values, 0 for void
 and `s` for segment `s - 1`, whose class is `*_classes[s - 1]`.

 # Safety
 Pointers must reference the stated number of elements.
 */
enum CmfStatus cmf_pq_accumulate(struct CmfPqStats *stats,
                                 size_t height,
                                 size_t width,
                                 const uint32_t *pred_ids,
                                 const uint16_t *pred_classes,
                                 size_t pred_count,
                                 const uint32_t *gt_ids,
                                 const uint16_t *gt_classes,
                                 size_t gt_count);

/*
 # Safety
 `stats` must be live and `out` writable.
 */
enum CmfStatus cmf_pq_class(const struct CmfPqStats *stats,
                            uint16_t class_id,
                            struct CmfClassPq *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MASKCL_H */
