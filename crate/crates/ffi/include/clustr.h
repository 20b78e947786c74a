#ifndef CLUSTR_H
#define CLUSTR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ClustrStatus {
  CLUSTR_STATUS_OK = 0,
  CLUSTR_STATUS_NULL_POINTER = 1,
  CLUSTR_STATUS_INVALID_ARGUMENT = 2,
  CLUSTR_STATUS_IO = 3,
  CLUSTR_STATUS_PARSE = 4,
  CLUSTR_STATUS_INFEASIBLE = 5,
  CLUSTR_STATUS_DEGENERATE = 6,
  CLUSTR_STATUS_PANIC = 7,
} ClustrStatus;

/**
 * A loaded artifact together with its cached Lipschitz bound.
 */
typedef struct ClustrArtifact ClustrArtifact;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads an `artifact.json` written by `clustr train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ClustrStatus clustr_artifact_load(const char *path, struct ClustrArtifact **out);

/**
 * Parses an artifact from its JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ClustrStatus clustr_artifact_from_json(const char *json, struct ClustrArtifact **out);

/**
 * Releases an artifact. Null is ignored.
 *
 * # Safety
 * `artifact` must come from a load function and not be used afterwards.
 */
void clustr_artifact_free(struct ClustrArtifact *artifact);

/**
 * Input dimension, output dimension of the network and number of classes.
 *
 * # Safety
 * All pointers must be valid.
 */
enum ClustrStatus clustr_artifact_dims(const struct ClustrArtifact *artifact,
                                       size_t *input_dim,
                                       size_t *output_dim,
                                       size_t *num_classes);

/**
 * Product of the per-layer spectral norms of the network.
 *
 * # Safety
 * All pointers must be valid.
 */
enum ClustrStatus clustr_lipschitz(const struct ClustrArtifact *artifact, double *out);

/**
 * Predicted class of `x` (length `len`).
 *
 * # Safety
 * `x` must point to `len` doubles; other pointers must be valid.
 */
enum ClustrStatus clustr_predict(const struct ClustrArtifact *artifact,
                                 const double *x,
                                 size_t len,
                                 size_t *out_class);

/**
 * Soft class probabilities of `x`, written to `out` (length `out_len`,
 * equal to the number of classes). Clustering artifacts only.
 *
 * # Safety
 * `x` must point to `len` doubles and `out` to `out_len` doubles.
 */
enum ClustrStatus clustr_probabilities(const struct ClustrArtifact *artifact,
                                       const double *x,
                                       size_t len,
                                       double *out,
                                       size_t out_len);

/**
 * Certified l2 radius of `x` and the nearest-centroid class it certifies.
 * A non-positive `lipschitz` uses the network's own bound.
 *
 * # Safety
 * `x` must point to `len` doubles; other pointers must be valid.
 */
enum ClustrStatus clustr_certify(const struct ClustrArtifact *artifact,
                                 const double *x,
                                 size_t len,
                                 double lipschitz,
                                 double *out_radius,
                                 size_t *out_class);

/**
 * Message of the last failed call on this thread, or an empty string.
 * Valid until the next call into this library on the same thread.
 */
const char *clustr_last_error(void);

/**
 * Library version as a static string.
 */
const char *clustr_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLUSTR_H */
