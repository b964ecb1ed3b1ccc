#ifndef C2F_H
#define C2F_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  C2F_STATUS_OK = 0,
  C2F_STATUS_NULL_POINTER = 1,
  C2F_STATUS_INVALID_ARGUMENT = 2,
  C2F_STATUS_CONFIG = 3,
  C2F_STATUS_FORMAT = 4,
  C2F_STATUS_DATA = 5,
  C2F_STATUS_IO = 6,
  C2F_STATUS_SHAPE = 7,
  C2F_STATUS_NON_FINITE = 8,
  C2F_STATUS_PANIC = 9,
} C2fStatus;

/**
 * A loaded checkpoint.
 */
typedef struct C2fModel C2fModel;

/**
 * Segmentation scores in percent.
 */
typedef struct {
  double mof;
  double edit;
  double f1_10;
  double f1_25;
  double f1_50;
} C2fSegReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *c2f_version(void);

/**
 * Message of the last failed call on this thread, empty after a success.
 * Valid until the next call into the library from the same thread.
 */
const char *c2f_last_error(void);

/**
 * Loads a checkpoint into `*out`. Free it with [`c2f_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
C2fStatus c2f_model_load(const char *path, C2fModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`c2f_model_load`] and not be freed twice.
 */
void c2f_model_free(C2fModel *model);

/**
 * Expected feature dimension, 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t c2f_model_feat_dim(const C2fModel *model);

/**
 * Number of action classes, 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t c2f_model_num_classes(const C2fModel *model);

/**
 * Frame-wise class probabilities, row-major `frames × num_classes`.
 *
 * # Safety
 * `features` must point to `frames * feat_dim` floats and `out` to
 * `out_len` writable doubles.
 */
C2fStatus c2f_model_predict_probs(const C2fModel *model,
                                  const float *features,
                                  size_t frames,
                                  size_t feat_dim,
                                  double *out,
                                  size_t out_len);

/**
 * Frame-wise action labels.
 *
 * # Safety
 * `features` must point to `frames * feat_dim` floats and `labels` to
 * `frames` writable integers.
 */
C2fStatus c2f_model_segment(const C2fModel *model,
                            const float *features,
                            size_t frames,
                            size_t feat_dim,
                            uint32_t *labels);

/**
 * Scores one predicted labeling against ground truth.
 *
 * # Safety
 * `pred` and `gt` must each point to `len` integers; `out` must be writable.
 */
C2fStatus c2f_segment_metrics(const uint32_t *pred,
                              const uint32_t *gt,
                              size_t len,
                              C2fSegReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* C2F_H */
