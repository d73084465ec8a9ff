#ifndef MOLFUSION_H
#define MOLFUSION_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_POINTER = 1,
  MF_STATUS_INVALID_UTF8 = 2,
  MF_STATUS_PARSE_ERROR = 3,
  MF_STATUS_BUFFER_TOO_SMALL = 4,
  MF_STATUS_IO = 5,
  MF_STATUS_ARCHIVE_ERROR = 6,
  MF_STATUS_SHAPE_MISMATCH = 7,
  MF_STATUS_PROVIDER_ERROR = 8,
  MF_STATUS_INTERNAL = 9,
} MfStatus;

/**
 * A Morgan bit fingerprint.
 */
typedef struct MfFingerprint MfFingerprint;

/**
 * A parsed molecule.
 */
typedef struct MfGraph MfGraph;

/**
 * A trained model loaded from an archive.
 */
typedef struct MfModel MfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length in bytes of the last error message on this thread, including the
 * terminating NUL. 1 when there is none.
 */
size_t mf_last_error_length(void);

/**
 * Copies the last error message on this thread into `out` (NUL-terminated).
 * Reading the message does not clear it.
 *
 * # Safety
 * `out` must be valid for `capacity` bytes.
 */
enum MfStatus mf_last_error_message(char *out, size_t capacity);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mf_version(void);

/**
 * Parses a SMILES string.
 *
 * # Safety
 * `smiles` must be a NUL-terminated string; `out` must be writable.
 */
enum MfStatus mf_graph_parse(const char *smiles, struct MfGraph **out);

/**
 * # Safety
 * `graph` must come from [`mf_graph_parse`] and not be used afterwards.
 */
void mf_graph_free(struct MfGraph *graph);

/**
 * Heavy-atom and bond counts.
 *
 * # Safety
 * `graph` must be a live handle; `atoms` and `bonds` must be writable.
 */
enum MfStatus mf_graph_size(const struct MfGraph *graph, size_t *atoms, size_t *bonds);

/**
 * The normalized graph operator as an `n x n` row-major matrix.
 *
 * # Safety
 * `out` must be valid for `capacity` doubles; `required` may be NULL.
 */
enum MfStatus mf_graph_spectral_operator(const struct MfGraph *graph,
                                         double *out,
                                         size_t capacity,
                                         size_t *required);

/**
 * Murcko scaffold key, empty for acyclic molecules.
 *
 * # Safety
 * `out` must be valid for `capacity` bytes; `required` may be NULL and
 * receives the size including the NUL.
 */
enum MfStatus mf_graph_scaffold(const struct MfGraph *graph,
                                char *out,
                                size_t capacity,
                                size_t *required);

/**
 * Morgan fingerprint of `graph`.
 *
 * # Safety
 * `graph` must be a live handle; `out` must be writable.
 */
enum MfStatus mf_fingerprint_new(const struct MfGraph *graph,
                                 uint32_t radius,
                                 size_t nbits,
                                 struct MfFingerprint **out);

/**
 * # Safety
 * `fp` must come from [`mf_fingerprint_new`] and not be used afterwards.
 */
void mf_fingerprint_free(struct MfFingerprint *fp);

/**
 * Number of set bits.
 *
 * # Safety
 * `fp` must be a live handle; `out` must be writable.
 */
enum MfStatus mf_fingerprint_popcount(const struct MfFingerprint *fp, size_t *out);

/**
 * Indices of the set bits in ascending order.
 *
 * # Safety
 * `out` must be valid for `capacity` entries; `required` may be NULL.
 */
enum MfStatus mf_fingerprint_bits(const struct MfFingerprint *fp,
                                  size_t *out,
                                  size_t capacity,
                                  size_t *required);

/**
 * Tanimoto similarity of two fingerprints of equal length.
 *
 * # Safety
 * `a` and `b` must be live handles; `out` must be writable.
 */
enum MfStatus mf_tanimoto(const struct MfFingerprint *a,
                          const struct MfFingerprint *b,
                          double *out);

/**
 * Loads a model archive. Predictions query the offline mock provider;
 * `cache_dir` may be NULL to disable the response cache.
 *
 * # Safety
 * `path` and (if not NULL) `cache_dir` must be NUL-terminated; `out` must be
 * writable.
 */
enum MfStatus mf_model_load(const char *path, const char *cache_dir, struct MfModel **out);

/**
 * # Safety
 * `model` must come from [`mf_model_load`] and not be used afterwards.
 */
void mf_model_free(struct MfModel *model);

/**
 * Number of predicted properties.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum MfStatus mf_model_target_count(const struct MfModel *model, size_t *out);

/**
 * Predicts the property vector of one molecule in original units.
 *
 * # Safety
 * `smiles` must be NUL-terminated; `out` must be valid for `capacity`
 * doubles.
 */
enum MfStatus mf_model_predict(const struct MfModel *model,
                               const char *smiles,
                               double *out,
                               size_t capacity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOLFUSION_H */
