#ifndef RSB_H
#define RSB_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a call.
 */
typedef enum RsbStatus {
  RSB_STATUS_OK = 0,
  RSB_STATUS_NULL_POINTER = 1,
  RSB_STATUS_INVALID_PARAMETER = 2,
  RSB_STATUS_DOMAIN = 3,
  RSB_STATUS_SIZE_GUARD = 4,
  RSB_STATUS_GRID_MISMATCH = 5,
  RSB_STATUS_NON_MONOTONE = 6,
  RSB_STATUS_UNBOUNDED = 7,
  RSB_STATUS_GRAPH_SAMPLING = 8,
  RSB_STATUS_PARSE = 9,
  RSB_STATUS_IO = 10,
  RSB_STATUS_PANIC = 11,
} RsbStatus;

/**
 * Discrete Parisi measure.
 */
typedef struct RsbMeasure RsbMeasure;

/**
 * Model parameters `(beta, c)` and the vertex coupling convention.
 */
typedef struct RsbParams RsbParams;

/**
 * Hierarchical measure on magnetizations.
 */
typedef struct RsbTree RsbTree;

/**
 * Value with its Monte Carlo standard error (0 for exact results).
 */
typedef struct RsbEstimate {
  double value;
  double std_error;
  uint64_t n_samples;
} RsbEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *rsb_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rsb_version(void);

/**
 * Creates a parameter handle.
 *
 * # Safety
 * `out_params` must be a valid pointer to writable storage for one handle.
 */
enum RsbStatus rsb_params_new(double beta,
                              size_t c,
                              bool vertex_uses_2c_couplings,
                              struct RsbParams **out_params);

/**
 * Releases a parameter handle. Null is ignored.
 *
 * # Safety
 * `params` must be null or a handle from [`rsb_params_new`] not yet freed.
 */
void rsb_params_free(struct RsbParams *params);

/**
 * Edge and vertex cavity functions at magnetizations `m` (length `2c`)
 * and couplings `j` (entries `+1` or `-1`).
 *
 * # Safety
 * `params` must be a live handle, `j` and `m` must point to `j_len` and
 * `m_len` readable elements, `out_edge` and `out_vertex` must be writable.
 */
enum RsbStatus rsb_psi(const struct RsbParams *params,
                       const int8_t *j,
                       size_t j_len,
                       const double *m,
                       size_t m_len,
                       double *out_edge,
                       double *out_vertex);

/**
 * Parses a tree from its JSON form.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out_tree` writable.
 */
enum RsbStatus rsb_tree_from_json(const char *json, struct RsbTree **out_tree);

/**
 * Number of levels below the root, `K + 1`.
 *
 * # Safety
 * `tree` must be a live handle and `out_depth` writable.
 */
enum RsbStatus rsb_tree_depth(const struct RsbTree *tree, size_t *out_depth);

/**
 * Releases a tree handle. Null is ignored.
 *
 * # Safety
 * `tree` must be null or a handle from [`rsb_tree_from_json`] not yet freed.
 */
void rsb_tree_free(struct RsbTree *tree);

/**
 * K-RSB functional of `tree` with exponents `x` (`x_0 = 0`, last `= 1`).
 * `outer == 0` selects the exact tree recursion; otherwise nested Monte
 * Carlo with `outer` paths and `inner` samples per level. `j_samples == 0`
 * averages over all coupling draws exactly.
 *
 * # Safety
 * Handles must be live, `x` must point to `x_len` readable values and
 * `out_estimate` must be writable.
 */
enum RsbStatus rsb_krsb_functional(const struct RsbTree *tree,
                                   const double *x,
                                   size_t x_len,
                                   const struct RsbParams *params,
                                   size_t j_samples,
                                   size_t outer,
                                   size_t inner,
                                   uint64_t seed,
                                   struct RsbEstimate *out_estimate);

/**
 * Builds a measure from grid `q` (length `K + 2`, from 0 to 1) and CDF
 * values `x` (length `K + 1`, the last equal to 1).
 *
 * # Safety
 * `q` and `x` must point to `q_len` and `x_len` readable values and
 * `out_measure` must be writable.
 */
enum RsbStatus rsb_measure_new(const double *q,
                               size_t q_len,
                               const double *x,
                               size_t x_len,
                               struct RsbMeasure **out_measure);

/**
 * Parses a measure from its JSON form.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out_measure` writable.
 */
enum RsbStatus rsb_measure_from_json(const char *json, struct RsbMeasure **out_measure);

/**
 * CDF of the measure at `q` in `[0, 1]`.
 *
 * # Safety
 * `measure` must be a live handle and `out_value` writable.
 */
enum RsbStatus rsb_measure_cdf(const struct RsbMeasure *measure, double q, double *out_value);

/**
 * Releases a measure handle. Null is ignored.
 *
 * # Safety
 * `measure` must be null or a live measure handle.
 */
void rsb_measure_free(struct RsbMeasure *measure);

/**
 * Full-RSB functional of `measure` with cavity magnetizations given by
 * `tree` placed on `grid` (one grid point per tree level plus `q = 0`).
 *
 * # Safety
 * Handles must be live, `grid` must point to `grid_len` readable values
 * and `out_estimate` must be writable.
 */
enum RsbStatus rsb_full_rsb(const struct RsbTree *tree,
                            const double *grid,
                            size_t grid_len,
                            const struct RsbMeasure *measure,
                            const struct RsbParams *params,
                            size_t j_samples,
                            size_t outer,
                            size_t inner,
                            uint64_t seed,
                            struct RsbEstimate *out_estimate);

/**
 * Replica-symmetric optimum: writes the minimizing `m` and the value.
 *
 * # Safety
 * `params` must be a live handle; `out_m` and `out_value` writable.
 */
enum RsbStatus rsb_optimize_rs(const struct RsbParams *params,
                               size_t j_samples,
                               size_t budget,
                               uint64_t seed,
                               double *out_m,
                               double *out_value);

/**
 * Exact quenched free energy per spin of `n_vertices`-vertex `c`-regular
 * graphs, averaged over `n_samples` graphs and coupling draws.
 *
 * # Safety
 * `out_estimate` must be writable.
 */
enum RsbStatus rsb_quenched_estimate(size_t n_vertices,
                                     size_t c,
                                     double beta,
                                     size_t n_samples,
                                     uint64_t seed,
                                     struct RsbEstimate *out_estimate);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* RSB_H */
