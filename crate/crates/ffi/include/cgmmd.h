#ifndef CGMMD_H
#define CGMMD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes returned by every function.
 */
typedef enum CgmmdStatus {
  CGMMD_STATUS_OK = 0,
  CGMMD_STATUS_NULL_POINTER = 1,
  CGMMD_STATUS_INVALID_ARGUMENT = 2,
  CGMMD_STATUS_DIMENSION_MISMATCH = 3,
  CGMMD_STATUS_NON_FINITE = 4,
  CGMMD_STATUS_IO = 5,
  CGMMD_STATUS_CHECKPOINT = 6,
  CGMMD_STATUS_PANIC = 7,
  CGMMD_STATUS_INTERNAL = 8,
} CgmmdStatus;

/**
 * Kernel families accepted by `cgmmd_ecmmd_estimate`.
 */
typedef enum CgmmdKernel {
  CGMMD_KERNEL_GAUSSIAN = 0,
  CGMMD_KERNEL_LAPLACE = 1,
} CgmmdKernel;

/**
 * Opaque handle to a loaded generator.
 */
typedef struct CgmmdGenerator CgmmdGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cgmmd_version(void);

/**
 * Message for the last failed call on this thread, or NULL if it succeeded.
 * The pointer stays valid until the next call on the same thread.
 */
const char *cgmmd_last_error_message(void);

/**
 * Loads a generator from checkpoint bytes.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes and `out` to writable storage.
 */
enum CgmmdStatus cgmmd_generator_load(const uint8_t *bytes,
                                      uintptr_t len,
                                      struct CgmmdGenerator **out);

/**
 * Loads a generator from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum CgmmdStatus cgmmd_generator_load_path(const char *path, struct CgmmdGenerator **out);

/**
 * Releases a generator. Passing NULL is a no-op.
 *
 * # Safety
 * `gen` must come from a load function and not be used afterwards.
 */
void cgmmd_generator_free(struct CgmmdGenerator *gen);

/**
 * Writes the predictor, noise and response dimensions.
 *
 * # Safety
 * `gen` must be a live handle; the out pointers must be writable.
 */
enum CgmmdStatus cgmmd_generator_dims(const struct CgmmdGenerator *gen,
                                      uintptr_t *d,
                                      uintptr_t *m,
                                      uintptr_t *p);

/**
 * Evaluates the generator on `n` rows of noise (`n x m`) and predictors
 * (`n x d`), writing `n x p` responses to `out`.
 *
 * # Safety
 * All arrays must have the sizes above.
 */
enum CgmmdStatus cgmmd_generator_generate(const struct CgmmdGenerator *gen,
                                          const double *eta,
                                          const double *x,
                                          uintptr_t n,
                                          double *out);

/**
 * Draws `n` responses at the single predictor value `x` (length `d`) with
 * noise seeded by `seed`, writing `n x p` values to `out`.
 *
 * # Safety
 * `x` must hold `d` values and `out` room for `n * p`.
 */
enum CgmmdStatus cgmmd_generator_sample(const struct CgmmdGenerator *gen,
                                        const double *x,
                                        uintptr_t n,
                                        uint64_t seed,
                                        double *out);

/**
 * Builds the k-nearest-neighbor graph of `n` points (`n x d`) and writes
 * the neighbor indices, `k` per point in ascending distance, to `out`.
 *
 * # Safety
 * `x` must hold `n * d` values and `out` room for `n * k` indices.
 */
enum CgmmdStatus cgmmd_knn_build(const double *x,
                                 uintptr_t n,
                                 uintptr_t d,
                                 uintptr_t k,
                                 uintptr_t *out);

/**
 * k-NN ECMMD estimate between observed responses `y` and generated
 * responses `z` (both `n x p`) given predictors `x` (`n x d`).
 *
 * # Safety
 * Arrays must have the sizes above and `out` must be writable.
 */
enum CgmmdStatus cgmmd_ecmmd_estimate(const double *x,
                                      const double *y,
                                      const double *z,
                                      uintptr_t n,
                                      uintptr_t d,
                                      uintptr_t p,
                                      uintptr_t k,
                                      enum CgmmdKernel kernel,
                                      double bandwidth,
                                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CGMMD_H */
