#ifndef PTOPK_H
#define PTOPK_H

/* Generated by cbindgen from crates/ffi/src; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PtopkStatus {
  PTOPK_STATUS_OK = 0,
  PTOPK_STATUS_NULL_POINTER = 1,
  PTOPK_STATUS_INVALID_ARGUMENT = 2,
  PTOPK_STATUS_SHAPE = 3,
  PTOPK_STATUS_NON_FINITE = 4,
  PTOPK_STATUS_FORMAT = 5,
  PTOPK_STATUS_IO = 6,
  PTOPK_STATUS_CONFIG = 7,
  PTOPK_STATUS_INTERNAL = 8,
  PTOPK_STATUS_PANIC = 9,
} PtopkStatus;

/*
 A trained model loaded from a checkpoint directory.
 */
typedef struct PtopkModel PtopkModel;

/*
 Saved noise and selections of one perturbed forward.
 */
typedef struct PtopkPerturbed PtopkPerturbed;

/*
 A dense f32 tensor.
 */
typedef struct PtopkTensor PtopkTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 NUL-terminated library version; static storage.
 */
const char *ptopk_version(void);

/*
 Message of the last failure on this thread, or NULL. Valid until the
 next failing call on the same thread.
 */
const char *ptopk_last_error(void);

/*
 Writes the `k` indices of the largest scores, ascending, to
 `out_indices`. Ties go to the lower index.
 */
enum PtopkStatus ptopk_hard_topk(const float *scores, size_t n, size_t k, size_t *out_indices);

/*
 Min-max normalization `(s - min) / (max - min + eps)` into `out` (length `n`).
 */
enum PtopkStatus ptopk_normalize_scores(const float *scores, size_t n, float eps, float *out);

/*
 σ at `step` of a linear decay from `sigma0` to 0 over `total_steps`.
 */
enum PtopkStatus ptopk_sigma_schedule(size_t step, size_t total_steps, float sigma0, float *out);

/*
 Perturbed Top-K forward. Writes the `n×k` soft indicator (row-major)
 to `out_y` and a context for the backward to `*out_ctx`.
 */
enum PtopkStatus ptopk_perturbed_forward(const float *scores,
                                         size_t n,
                                         size_t k,
                                         size_t samples,
                                         float sigma,
                                         uint64_t seed,
                                         float *out_y,
                                         struct PtopkPerturbed **out_ctx);

/*
 Gradient wrt the scores (length `n`) given the `n×k` gradient wrt the
 indicator.
 */
enum PtopkStatus ptopk_perturbed_backward(const struct PtopkPerturbed *ctx,
                                          const float *grad_y,
                                          float *out_grad_scores);

void ptopk_perturbed_free(struct PtopkPerturbed *ctx);

/*
 Patches `Yᵀ·P` of an `h×w×c` image (row-major HWC) for square patches
 of side `patch` on a grid with step `stride`. `y` is `n×k` with `n` the
 number of grid cells; `out` receives `k×patch×patch×c` values.
 */
enum PtopkStatus ptopk_extract_patches(const float *image,
                                       size_t h,
                                       size_t w,
                                       size_t c,
                                       size_t patch,
                                       size_t stride,
                                       const float *y,
                                       size_t n,
                                       size_t k,
                                       float *out);

/*
 Reads a PTKT tensor file.
 */
enum PtopkStatus ptopk_tensor_load(const char *path, struct PtopkTensor **out);

/*
 Number of dimensions; 0 for a NULL handle.
 */
size_t ptopk_tensor_rank(const struct PtopkTensor *t);

/*
 Number of elements; 0 for a NULL handle.
 */
size_t ptopk_tensor_numel(const struct PtopkTensor *t);

/*
 Copies the shape into `out_dims`, which holds `capacity` entries.
 */
enum PtopkStatus ptopk_tensor_shape(const struct PtopkTensor *t, size_t *out_dims, size_t capacity);

/*
 Row-major data, valid until the handle is freed; NULL for a NULL handle.
 */
const float *ptopk_tensor_data(const struct PtopkTensor *t);

void ptopk_tensor_free(struct PtopkTensor *t);

/*
 Loads a checkpoint directory written by `ptopk train`.
 */
enum PtopkStatus ptopk_model_load(const char *dir, struct PtopkModel **out);

/*
 Writes `[height, width, channels]` of the expected image.
 */
enum PtopkStatus ptopk_model_input_shape(const struct PtopkModel *model, size_t *out_hwc);

/*
 Number of logits; 0 for a NULL handle.
 */
size_t ptopk_model_num_classes(const struct PtopkModel *model);

/*
 Patches selected per image; 0 for a NULL handle.
 */
size_t ptopk_model_k(const struct PtopkModel *model);

/*
 Hard Top-K inference on one `h×w×c` image of `len` values. Writes
 `num_classes` logits, the predicted class, and, when `out_patches` is
 not NULL, the `k` selected patch indices in ascending order.
 */
enum PtopkStatus ptopk_model_predict(const struct PtopkModel *model,
                                     const float *image,
                                     size_t len,
                                     float *out_logits,
                                     size_t *out_class,
                                     size_t *out_patches);

void ptopk_model_free(struct PtopkModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PTOPK_H */
