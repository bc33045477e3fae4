#ifndef FOLDDIFF_H
#define FOLDDIFF_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define FD_ESTIMAND_PSI1 0

#define FD_ESTIMAND_PSI1G 1

#define FD_ESTIMAND_PSI2 2

#define FD_ESTIMAND_PSI2G 3

// Default method for the estimand: tmle for adjusted, plugin for unadjusted.
#define FD_METHOD_DEFAULT 0

#define FD_METHOD_PLUGIN 1

#define FD_METHOD_ONESTEP 2

#define FD_METHOD_TMLE 3

#define FD_TMLE_TWO_STAGE 0

#define FD_TMLE_SINGLE_STAGE 1

// Default centering for the estimand: smoothed median when centered, none otherwise.
#define FD_CENTER_DEFAULT 0

#define FD_CENTER_NONE 1

#define FD_CENTER_MEAN 2

#define FD_CENTER_REFERENCE 3

#define FD_CENTER_SMEDIAN 4

// Result code of every fallible call.
typedef enum FdStatus {
  FD_STATUS_OK = 0,
  FD_STATUS_NULL_POINTER = 1,
  FD_STATUS_INVALID_ARGUMENT = 2,
  FD_STATUS_CONFIG_ERROR = 3,
  FD_STATUS_DATA_ERROR = 4,
  FD_STATUS_IO_ERROR = 5,
  FD_STATUS_NUMERICAL_ERROR = 6,
  FD_STATUS_PANIC = 7,
} FdStatus;

// Opaque dataset handle.
typedef struct FdDataset FdDataset;

// Opaque estimation result handle.
typedef struct FdEstimate FdEstimate;

// Estimation settings; obtain defaults from [`fd_options_default`].
typedef struct FdOptions {
  // One of the `FD_ESTIMAND_*` values.
  int32_t estimand;
  // One of the `FD_METHOD_*` values.
  int32_t method;
  // One of the `FD_TMLE_*` values.
  int32_t tmle_mode;
  // One of the `FD_CENTER_*` values.
  int32_t centering;
  // Zero-based reference category for `FD_CENTER_REFERENCE`.
  size_t reference;
  // Scale of the smoothed median for `FD_CENTER_SMEDIAN`.
  double smedian_eps;
  size_t k;
  size_t v;
  size_t b;
  double alpha;
  uint64_t seed;
} FdOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *fd_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *fd_version(void);

struct FdOptions fd_options_default(void);

// Builds a dataset from row-major arrays: `w` is `n x j` outcomes, `a` is
// `n` exposures (0 or 1) and `x` is `n x p` covariates (may be null when `p == 0`).
//
// # Safety
// The pointers must reference arrays of the stated sizes and `out` must be writable.
enum FdStatus fd_dataset_new(const double *w,
                             const uint8_t *a,
                             const double *x,
                             size_t n,
                             size_t j,
                             size_t p,
                             struct FdDataset **out);

// Loads a dataset from an outcome table and a metadata table.
// `covariates` is a comma-separated list of metadata columns and may be null.
//
// # Safety
// String arguments must be NUL-terminated and `out` must be writable.
enum FdStatus fd_dataset_load(const char *counts_path,
                              const char *meta_path,
                              const char *exposure,
                              const char *covariates,
                              struct FdDataset **out);

// # Safety
// `d` must be null or a handle from `fd_dataset_new`/`fd_dataset_load` not yet freed.
void fd_dataset_free(struct FdDataset *d);

// Number of samples, or 0 for a null handle.
//
// # Safety
// `d` must be null or a live dataset handle.
size_t fd_dataset_n(const struct FdDataset *d);

// Number of categories, or 0 for a null handle.
//
// # Safety
// `d` must be null or a live dataset handle.
size_t fd_dataset_n_categories(const struct FdDataset *d);

// Runs estimation; `opts` may be null for defaults.
//
// # Safety
// `d` must be a live dataset handle and `out` must be writable.
enum FdStatus fd_estimate(const struct FdDataset *d,
                          const struct FdOptions *opts,
                          struct FdEstimate **out);

// # Safety
// `e` must be null or a handle from `fd_estimate` not yet freed.
void fd_estimate_free(struct FdEstimate *e);

// Number of categories in the result, or 0 for a null handle.
//
// # Safety
// `e` must be null or a live result handle.
size_t fd_estimate_len(const struct FdEstimate *e);

// Copies per-category results into caller buffers of length `len`, which
// must equal `fd_estimate_len`. Any output pointer may be null to skip it.
// Non-estimable categories hold NaN.
//
// # Safety
// Non-null buffers must hold at least `len` doubles.
enum FdStatus fd_estimate_values(const struct FdEstimate *e,
                                 size_t len,
                                 double *estimate,
                                 double *se,
                                 double *ci_lower,
                                 double *ci_upper,
                                 double *sim_lower,
                                 double *sim_upper,
                                 double *p_value);

// Writes 1 for estimable categories and 0 otherwise.
//
// # Safety
// `out` must hold at least `len` bytes.
enum FdStatus fd_estimate_estimable(const struct FdEstimate *e, size_t len, uint8_t *out);

// Simultaneous critical value, or NaN for a null handle.
//
// # Safety
// `e` must be null or a live result handle.
double fd_estimate_crit_simultaneous(const struct FdEstimate *e);

// Serializes the result table as JSON into a new string released with `fd_string_free`.
//
// # Safety
// `e` must be a live result handle and `out` must be writable.
enum FdStatus fd_estimate_to_json(const struct FdEstimate *e, char **out);

// # Safety
// `s` must be null or a string returned by this library not yet freed.
void fd_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FOLDDIFF_H */
