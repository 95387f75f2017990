#ifndef BOWLKIT_H
#define BOWLKIT_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum BowlStatus {
  BOWL_STATUS_OK = 0,
  BOWL_STATUS_NULL_POINTER = 1,
  BOWL_STATUS_INVALID_ARGUMENT = 2,
  BOWL_STATUS_IO = 3,
  BOWL_STATUS_FORMAT = 4,
  BOWL_STATUS_DIMENSION = 5,
  BOWL_STATUS_CONFIG = 6,
  BOWL_STATUS_DEGENERATE = 7,
  BOWL_STATUS_PANIC = 8,
  BOWL_STATUS_OTHER = 9,
} BowlStatus;

// Opaque exemplar set.
typedef struct BowlExemplarSet BowlExemplarSet;

// Axis-aligned box, top-left corner plus size.
typedef struct BowlBox {
  double x;
  double y;
  double w;
  double h;
} BowlBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *bowl_version(void);

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *bowl_last_error_message(void);

// Build an exemplar set from `n` row-major vectors of length `dim`.
// Rows need not be unit length.
//
// # Safety
// `data` must point to `n * dim` floats and `out` to writable storage.
enum BowlStatus bowl_exemplar_set_build(const float *data,
                                        size_t n,
                                        size_t dim,
                                        float lambda,
                                        struct BowlExemplarSet **out);

// Load an exemplar file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum BowlStatus bowl_exemplar_set_load(const char *path, struct BowlExemplarSet **out);

// Write an exemplar file.
//
// # Safety
// `set` must come from this library and `path` must be NUL-terminated.
enum BowlStatus bowl_exemplar_set_save(const struct BowlExemplarSet *set, const char *path);

// The `n` most-counted exemplars as a new set.
//
// # Safety
// `set` must come from this library and `out` must be writable.
enum BowlStatus bowl_exemplar_set_top_n(const struct BowlExemplarSet *set,
                                        size_t n,
                                        struct BowlExemplarSet **out);

// Number of exemplars; 0 for a null handle.
//
// # Safety
// `set` must be null or come from this library.
size_t bowl_exemplar_set_len(const struct BowlExemplarSet *set);

// Embedding dimension; 0 for a null handle.
//
// # Safety
// `set` must be null or come from this library.
size_t bowl_exemplar_set_dim(const struct BowlExemplarSet *set);

// Nearest-neighbour count of exemplar `index`.
//
// # Safety
// `set` must come from this library and `count` must be writable.
enum BowlStatus bowl_exemplar_set_count(const struct BowlExemplarSet *set,
                                        size_t index,
                                        uint64_t *count);

// Maximum cosine similarity to the set for each of `n` query rows. Queries
// are normalized first.
//
// # Safety
// `queries` must hold `n * dim` floats and `out` room for `n`.
enum BowlStatus bowl_exemplar_set_s_max(const struct BowlExemplarSet *set,
                                        const float *queries,
                                        size_t n,
                                        float *out);

// Release a set. Null is ignored.
//
// # Safety
// `set` must be null or a handle from this library not yet freed.
void bowl_exemplar_set_free(struct BowlExemplarSet *set);

// Intersection over union; 0 when the union is empty.
double bowl_iou(struct BowlBox a, struct BowlBox b);

// Otsu threshold over `n` scores with `bins` histogram bins.
//
// # Safety
// `values` must hold `n` doubles and `gamma` must be writable.
enum BowlStatus bowl_otsu_gamma(const double *values, size_t n, size_t bins, double *gamma);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BOWLKIT_H */
