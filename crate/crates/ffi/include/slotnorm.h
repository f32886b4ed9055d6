#ifndef SLOTNORM_H
#define SLOTNORM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum SlotnormStatus {
  SLOTNORM_STATUS_OK = 0,
  SLOTNORM_STATUS_NULL_POINTER = 1,
  SLOTNORM_STATUS_INVALID_ARGUMENT = 2,
  SLOTNORM_STATUS_SHAPE = 3,
  SLOTNORM_STATUS_CONTRACT = 4,
  SLOTNORM_STATUS_NUMERIC = 5,
  SLOTNORM_STATUS_UNDEFINED_METRIC = 6,
  SLOTNORM_STATUS_IO = 7,
  SLOTNORM_STATUS_FORMAT = 8,
  SLOTNORM_STATUS_CONFIG = 9,
  SLOTNORM_STATUS_PANIC = 10,
  SLOTNORM_STATUS_INTERNAL = 11,
} SlotnormStatus;

/*
 Loaded model checkpoint.
 */
typedef struct SlotnormModel SlotnormModel;

/*
 Fitted von Mises-Fisher mixture with its log-likelihood trace.
 */
typedef struct SlotnormVmfMixture SlotnormVmfMixture;

/*
 Message of the most recent failure on this thread ("" after success).
 Valid until the next slotnorm call on the same thread.
 */
const char *slotnorm_last_error_message(void);

/*
 Loads a checkpoint written by `slotnorm train`.

 # Safety
 `path` must be a NUL-terminated string; `out_model` must be writable.
 */
enum SlotnormStatus slotnorm_model_load(const char *path, struct SlotnormModel **out_model);

/*
 # Safety
 `model` must come from [`slotnorm_model_load`] and not be used afterwards.
 */
void slotnorm_model_free(struct SlotnormModel *model);

/*
 Square image side the model expects.

 # Safety
 `model` must be a live handle; `out_resolution` must be writable.
 */
enum SlotnormStatus slotnorm_model_resolution(const struct SlotnormModel *model,
                                              size_t *out_resolution);

/*
 Segments one `height × width × 3` image (row-major, values in [-1, 1])
 with `slots` slots and `iters` iterations; writes `height * width` slot
 indices to `out_labels`. `seed` fixes the slot initialization.

 # Safety
 `image` must hold `height * width * 3` doubles and `out_labels`
 `height * width` entries.
 */
enum SlotnormStatus slotnorm_model_segment(const struct SlotnormModel *model,
                                           const double *image,
                                           size_t height,
                                           size_t width,
                                           size_t slots,
                                           size_t iters,
                                           uint64_t seed,
                                           uint32_t *out_labels);

/*
 Fits a `k`-component mixture with shared concentration to `n` unit rows
 of dimension `d`.

 # Safety
 `x` must hold `n * d` doubles; `out_mixture` must be writable.
 */
enum SlotnormStatus slotnorm_vmf_fit(const double *x,
                                     size_t n,
                                     size_t d,
                                     size_t k,
                                     size_t iters,
                                     double concentration,
                                     uint64_t seed,
                                     struct SlotnormVmfMixture **out_mixture);

/*
 # Safety
 `mixture` must come from [`slotnorm_vmf_fit`] and not be used afterwards.
 */
void slotnorm_vmf_free(struct SlotnormVmfMixture *mixture);

/*
 Number of components and dimension.

 # Safety
 `mixture` must be a live handle; outputs must be writable.
 */
enum SlotnormStatus slotnorm_vmf_shape(const struct SlotnormVmfMixture *mixture,
                                       size_t *out_components,
                                       size_t *out_dim);

/*
 Copies the `components × dim` mean directions, row-major.

 # Safety
 `out_directions` must hold `len` doubles.
 */
enum SlotnormStatus slotnorm_vmf_directions(const struct SlotnormVmfMixture *mixture,
                                            double *out_directions,
                                            size_t len);

/*
 Copies the mixing weights.

 # Safety
 `out_weights` must hold `len` doubles.
 */
enum SlotnormStatus slotnorm_vmf_weights(const struct SlotnormVmfMixture *mixture,
                                         double *out_weights,
                                         size_t len);

/*
 Length of the log-likelihood trace (iterations + 1).

 # Safety
 `mixture` must be a live handle; `out_len` must be writable.
 */
enum SlotnormStatus slotnorm_vmf_trace_len(const struct SlotnormVmfMixture *mixture,
                                           size_t *out_len);

/*
 Copies the log-likelihood trace, initial value first.

 # Safety
 `out_trace` must hold `len` doubles.
 */
enum SlotnormStatus slotnorm_vmf_trace(const struct SlotnormVmfMixture *mixture,
                                       double *out_trace,
                                       size_t len);

/*
 Log-likelihood (up to the normalizing constant) of `n × d` unit rows.

 # Safety
 `x` must hold `n * d` doubles; `out_value` must be writable.
 */
enum SlotnormStatus slotnorm_vmf_log_likelihood(const struct SlotnormVmfMixture *mixture,
                                                const double *x,
                                                size_t n,
                                                size_t d,
                                                double *out_value);

/*
 Adjusted Rand index of two labelings of `n` pixels.

 # Safety
 `pred` and `truth` must hold `n` values; `out_value` must be writable.
 */
enum SlotnormStatus slotnorm_ari(const uint32_t *pred,
                                 const uint32_t *truth,
                                 size_t n,
                                 double *out_value);

/*
 ARI over pixels whose true label differs from `background`.

 # Safety
 `pred` and `truth` must hold `n` values; `out_value` must be writable.
 */
enum SlotnormStatus slotnorm_foreground_ari(const uint32_t *pred,
                                            const uint32_t *truth,
                                            size_t n,
                                            uint32_t background,
                                            double *out_value);

/*
 Runs the theory checks; reports how many of how many passed.

 # Safety
 Outputs must be writable.
 */
enum SlotnormStatus slotnorm_verify(uint64_t seed, size_t *out_passed, size_t *out_total);

#endif  /* SLOTNORM_H */
