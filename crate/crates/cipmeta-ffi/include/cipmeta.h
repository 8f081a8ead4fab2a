#ifndef CIPMETA_H
#define CIPMETA_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum CipStatus {
  CIP_STATUS_OK = 0,
  CIP_STATUS_NULL_POINTER = 1,
  CIP_STATUS_INVALID_UTF8 = 2,
  CIP_STATUS_PARSE = 3,
  CIP_STATUS_INVALID_INPUT = 4,
  CIP_STATUS_SPACE_TOO_LARGE = 5,
  CIP_STATUS_ASSUMPTION_VIOLATED = 6,
  CIP_STATUS_DIVERGED = 7,
  CIP_STATUS_NUMERICAL = 8,
  CIP_STATUS_BUFFER_TOO_SMALL = 9,
  CIP_STATUS_PANIC = 10,
} CipStatus;

/**
 * Opaque site graph.
 */
typedef struct CipGraph CipGraph;

/**
 * Size of the metastable hierarchy.
 */
typedef struct CipHierarchySummary {
  size_t n_sites;
  /**
   * `|S⋆|`.
   */
  size_t n_star;
  size_t kappa2;
  size_t kappa3;
  /**
   * Largest measure on `S₀`, or NaN when `S₀` is empty.
   */
  double m_star;
} CipHierarchySummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Parses a graph from a NUL-terminated JSON string.
 *
 * # Safety
 * `json` must be a valid C string and `out` a valid pointer. The handle
 * written to `*out` must be released with [`cip_graph_free`].
 */
enum CipStatus cip_graph_from_json(const char *json, struct CipGraph **out);

/**
 * Releases a graph handle. Null is ignored.
 *
 * # Safety
 * `g` must come from [`cip_graph_from_json`] and not be used afterwards.
 */
void cip_graph_free(struct CipGraph *g);

/**
 * Number of sites, or 0 for a null handle.
 *
 * # Safety
 * `g` must be null or a live handle.
 */
size_t cip_graph_site_count(const struct CipGraph *g);

/**
 * Stationary site measure normalized to `max m = 1`, written to `out[0..len]`.
 *
 * # Safety
 * `out` must point to at least `len` writable doubles.
 */
enum CipStatus cip_graph_measure(const struct CipGraph *g, double *out, size_t len);

/**
 * Summary of the metastable hierarchy.
 *
 * # Safety
 * `g` must be a live handle and `out` a valid pointer.
 */
enum CipStatus cip_hierarchy_summary(const struct CipGraph *g, struct CipHierarchySummary *out);

/**
 * Third-scale constant `K_xy` for condensing sites `x` and `y`.
 * A non-positive `lambda` selects the default resolvent parameter.
 *
 * # Safety
 * `g` must be a live handle and `out` a valid pointer.
 */
enum CipStatus cip_kconstant(const struct CipGraph *g,
                             size_t x,
                             size_t y,
                             double lambda,
                             double *out);

/**
 * Exact capacity between the condensates `ξ^x` and `ξ^y` with `n`
 * particles and diffusion `d`, enumerating at most `budget` states.
 *
 * # Safety
 * `g` must be a live handle and `out` a valid pointer.
 */
enum CipStatus cip_exact_capacity(const struct CipGraph *g,
                                  size_t x,
                                  size_t y,
                                  size_t n,
                                  double d,
                                  size_t budget,
                                  double *out);

/**
 * Copies the calling thread's last error message into `buf`, NUL-terminated
 * and truncated to fit. Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t cip_last_error_message(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CIPMETA_H */
