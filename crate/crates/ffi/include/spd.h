#ifndef SPD_FFI_H
#define SPD_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SpdStatus {
  SPD_STATUS_OK = 0,
  SPD_STATUS_NULL_POINTER = 1,
  SPD_STATUS_INVALID_ARGUMENT = 2,
  SPD_STATUS_SHAPE_MISMATCH = 3,
  SPD_STATUS_IO = 4,
  SPD_STATUS_CHECKPOINT = 5,
  SPD_STATUS_NUMERICAL = 6,
  SPD_STATUS_CONFIG = 7,
  SPD_STATUS_BUFFER_TOO_SMALL = 8,
  SPD_STATUS_PANIC = 9,
} SpdStatus;

/**
 * A decomposition together with the target it was trained on.
 */
typedef struct SpdDecomposition SpdDecomposition;

/**
 * A trained target model.
 */
typedef struct SpdTarget SpdTarget;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length
 * excluding the terminator, so a caller can size the buffer.
 */
size_t spd_last_error_message(char *buf, size_t len);

/**
 * Loads a target checkpoint written by `spd train-target`.
 */
enum SpdStatus spd_target_load(const char *path, struct SpdTarget **out);

void spd_target_free(struct SpdTarget *target);

/**
 * Input and output width of the model.
 */
enum SpdStatus spd_target_n_features(const struct SpdTarget *target, size_t *out);

/**
 * Forward pass on `batch × n_features` inputs; writes `batch × n_features`
 * outputs.
 */
enum SpdStatus spd_target_forward(const struct SpdTarget *target,
                                  const double *x,
                                  size_t batch,
                                  size_t n_features,
                                  double *out,
                                  size_t out_len);

/**
 * Loads an SPD checkpoint written by `spd decompose`.
 */
enum SpdStatus spd_decomposition_load(const char *path, struct SpdDecomposition **out);

void spd_decomposition_free(struct SpdDecomposition *dec);

/**
 * Number of decomposed matrices.
 */
enum SpdStatus spd_decomposition_n_sites(const struct SpdDecomposition *dec, size_t *out);

/**
 * Number of subcomponents of matrix `site`.
 */
enum SpdStatus spd_decomposition_n_subcomponents(const struct SpdDecomposition *dec,
                                                 size_t site,
                                                 size_t *out);

/**
 * Mean max cosine similarity of matrix `site`.
 */
enum SpdStatus spd_decomposition_mmcs(const struct SpdDecomposition *dec, size_t site, double *out);

/**
 * Mean L2 ratio of matrix `site`.
 */
enum SpdStatus spd_decomposition_ml2r(const struct SpdDecomposition *dec, size_t site, double *out);

/**
 * Subcomponents of `site` whose norm exceeds `threshold` times the
 * largest in that matrix.
 */
enum SpdStatus spd_decomposition_count_nonnegligible(const struct SpdDecomposition *dec,
                                                     size_t site,
                                                     double threshold,
                                                     size_t *out);

/**
 * Causal importances of matrix `site` for `batch × n_features` inputs;
 * writes `batch × C` values.
 */
enum SpdStatus spd_decomposition_causal_importance(const struct SpdDecomposition *dec,
                                                   const double *x,
                                                   size_t batch,
                                                   size_t n_features,
                                                   size_t site,
                                                   double *out,
                                                   size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPD_FFI_H */
