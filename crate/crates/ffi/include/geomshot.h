#ifndef GEOMSHOT_H
#define GEOMSHOT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GeomshotRepresentation {
  // Wrist-centred, scale-normalised coordinates (63 values).
  GEOMSHOT_REPRESENTATION_RAW = 0,
  // Joint angles in radians (20 values).
  GEOMSHOT_REPRESENTATION_ANGLE = 1,
  // `Raw` followed by `Angle` (83 values).
  GEOMSHOT_REPRESENTATION_RAW_ANGLE = 2,
  // Unprocessed coordinates (63 values).
  GEOMSHOT_REPRESENTATION_RAW_UNNORMALIZED = 3,
} GeomshotRepresentation;

typedef enum GeomshotStatus {
  GEOMSHOT_STATUS_OK = 0,
  GEOMSHOT_STATUS_NULL_POINTER = 1,
  GEOMSHOT_STATUS_INVALID_ARGUMENT = 2,
  // All keypoints coincide, so the hand cannot be scale-normalised.
  GEOMSHOT_STATUS_DEGENERATE_HAND = 3,
  GEOMSHOT_STATUS_IO = 4,
  GEOMSHOT_STATUS_CORRUPT_CHECKPOINT = 5,
  // A buffer length does not match the expected shape.
  GEOMSHOT_STATUS_SHAPE = 6,
  // An internal error; see `geomshot_last_error`.
  GEOMSHOT_STATUS_INTERNAL = 7,
} GeomshotStatus;

// A loaded encoder. Create with `geomshot_encoder_load`, release with
// `geomshot_encoder_free`.
typedef struct GeomshotEncoder GeomshotEncoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *geomshot_last_error(void);

// Library version as a static NUL-terminated string.
const char *geomshot_version(void);

// Number of values a representation produces.
size_t geomshot_feature_dim(enum GeomshotRepresentation representation);

// Computes features for one hand given as 21 `(x, y, z)` rows (63 values).
//
// # Safety
// `keypoints` must point to 63 doubles and `out` to `out_len` writable doubles.
enum GeomshotStatus geomshot_features(const double *keypoints,
                                      enum GeomshotRepresentation representation,
                                      double *out,
                                      size_t out_len);

// Loads an encoder checkpoint. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum GeomshotStatus geomshot_encoder_load(const char *path, struct GeomshotEncoder **out);

// Releases a handle from `geomshot_encoder_load`. Null is ignored.
//
// # Safety
// `encoder` must be null or a live handle; it must not be used afterwards.
void geomshot_encoder_free(struct GeomshotEncoder *encoder);

// Input width of the encoder, or 0 for a null handle.
//
// # Safety
// `encoder` must be null or a live handle.
size_t geomshot_encoder_input_dim(const struct GeomshotEncoder *encoder);

// Embedding width of the encoder, or 0 for a null handle.
//
// # Safety
// `encoder` must be null or a live handle.
size_t geomshot_encoder_embed_dim(const struct GeomshotEncoder *encoder);

// Embeds `rows` feature vectors of width `cols` (must equal the input
// width) in inference mode. `out` receives `rows * embed_dim` values.
//
// # Safety
// `encoder` must be a live handle, `x` valid for `rows * cols` reads and
// `out` for `out_len` writes.
enum GeomshotStatus geomshot_encoder_embed(const struct GeomshotEncoder *encoder,
                                           const double *x,
                                           size_t rows,
                                           size_t cols,
                                           double *out,
                                           size_t out_len);

// Nearest-prototype classification. Prototypes are the per-label means of
// the `n_support` support rows (labels in `0..n_way`, every label with the
// same non-zero number of rows);
// each of the `n_query` query rows is assigned the label of the closest
// prototype in squared Euclidean distance, ties going to the lower label.
//
// # Safety
// `support` must be valid for `n_support * dim` reads, `labels` for
// `n_support`, `query` for `n_query * dim`, and `predictions` for
// `n_query` writes.
enum GeomshotStatus geomshot_classify(const double *support,
                                      const size_t *labels,
                                      size_t n_support,
                                      size_t n_way,
                                      const double *query,
                                      size_t n_query,
                                      size_t dim,
                                      size_t *predictions);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOMSHOT_H */
