/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef PAT_H
#define PAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes shared by every exported function.
 */
typedef enum PatStatus {
  PAT_STATUS_OK = 0,
  PAT_STATUS_NULL_POINTER = 1,
  PAT_STATUS_SHAPE = 2,
  PAT_STATUS_CONTRACT = 3,
  PAT_STATUS_PARSE = 4,
  PAT_STATUS_CHECKPOINT = 5,
  PAT_STATUS_IO = 6,
  PAT_STATUS_INVALID_UTF8 = 7,
  PAT_STATUS_PANIC = 8,
} PatStatus;

/*
 Opaque handle to a loaded classifier.
 */
typedef struct PatModel PatModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Loads a classifier checkpoint written by `pat finetune`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer. On
 success `*out` owns a handle that must be released with
 [`pat_model_free`].
 */
enum PatStatus pat_model_load(const char *path, struct PatModel **out);

/*
 Releases a handle from [`pat_model_load`]. Null is ignored.

 # Safety
 `model` must be null or a handle not yet freed.
 */
void pat_model_free(struct PatModel *model);

/*
 Series length `T` the model expects, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t pat_model_series_len(const struct PatModel *model);

/*
 Number of patch tokens `N`, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t pat_model_num_patches(const struct PatModel *model);

/*
 Probability of the positive class for one standardized series.

 # Safety
 `series` must point to `len` floats and `out` to one writable float.
 */
enum PatStatus pat_predict(const struct PatModel *model,
                           const float *series,
                           size_t len,
                           float *out);

/*
 Minute-level attention importance (last block, attention received,
 averaged over heads, summing to one over patches) for one standardized
 series. `out_len` must equal `len`.

 # Safety
 `series` must point to `len` floats and `out` to `out_len` writable floats.
 */
enum PatStatus pat_importance(const struct PatModel *model,
                              const float *series,
                              size_t len,
                              float *out,
                              size_t out_len);

/*
 Area under the ROC curve, ties counting one half. Labels are 0 or 1.

 # Safety
 `scores` and `labels` must each point to `n` values; `out` to one double.
 */
enum PatStatus pat_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/*
 Message for the most recent failure on this thread, or null. The pointer
 stays valid until the next call into this library from the same thread.
 */
const char *pat_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PAT_H */
