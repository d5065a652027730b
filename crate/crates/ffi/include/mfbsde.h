#ifndef MFBSDE_H
#define MFBSDE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum MfbsdeStatus {
  MFBSDE_STATUS_OK = 0,
  MFBSDE_STATUS_INTERNAL = 1,
  MFBSDE_STATUS_VALIDATION = 2,
  MFBSDE_STATUS_NON_CONVERGENCE = 3,
  MFBSDE_STATUS_HYPOTHESIS = 4,
  MFBSDE_STATUS_INVALID_ARGUMENT = 5,
} MfbsdeStatus;

/**
 * Outcome of a run written to disk.
 */
typedef struct MfbsdeRun MfbsdeRun;

/**
 * A parsed and validated scenario.
 */
typedef struct MfbsdeScenario MfbsdeScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mfbsde_version(void);

/**
 * Message of the last failure on this thread, or an empty string. The
 * pointer stays valid until the next call into the library on this thread.
 */
const char *mfbsde_last_error(void);

/**
 * Parses a scenario document. On a validation failure the message lists
 * every offending key.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum MfbsdeStatus mfbsde_scenario_parse(const char *text, struct MfbsdeScenario **out);

/**
 * Releases a scenario; null is ignored.
 *
 * # Safety
 * `h` must be null or a handle from [`mfbsde_scenario_parse`] not yet freed.
 */
void mfbsde_scenario_free(struct MfbsdeScenario *h);

/**
 * Overrides the seed.
 *
 * # Safety
 * `h` must be a live scenario handle.
 */
enum MfbsdeStatus mfbsde_scenario_set_seed(struct MfbsdeScenario *h, uint64_t seed);

/**
 * Overrides the number of paths (at least 1).
 *
 * # Safety
 * `h` must be a live scenario handle.
 */
enum MfbsdeStatus mfbsde_scenario_set_paths(struct MfbsdeScenario *h, size_t n_paths);

/**
 * Solves the scenario in memory and returns `Y(0)` (the utility of the
 * candidate control in utility mode) with its standard error.
 *
 * # Safety
 * `h` must be a live scenario handle; `y0` and `se` must be valid pointers.
 */
enum MfbsdeStatus mfbsde_scenario_solve(struct MfbsdeScenario *h, double *y0, double *se);

/**
 * Runs the scenario and writes CSV files and the manifest into `out_dir`.
 * A run that completes but does not converge or fails a comparison
 * hypothesis still yields a handle, and the matching status is returned.
 *
 * # Safety
 * `h` must be a live scenario handle, `out_dir` a NUL-terminated path and
 * `out` a valid pointer.
 */
enum MfbsdeStatus mfbsde_run(struct MfbsdeScenario *h, const char *out_dir, struct MfbsdeRun **out);

/**
 * Process exit code of the run: 0, 3 or 4. Returns -1 for a null handle.
 *
 * # Safety
 * `r` must be null or a live run handle.
 */
int32_t mfbsde_run_exit_code(const struct MfbsdeRun *r);

/**
 * SHA-256 run identifier (64 hex characters), valid while the handle lives.
 *
 * # Safety
 * `r` must be null or a live run handle.
 */
const char *mfbsde_run_id(const struct MfbsdeRun *r);

/**
 * Number of CSV files written, excluding the manifest.
 *
 * # Safety
 * `r` must be null or a live run handle.
 */
size_t mfbsde_run_file_count(const struct MfbsdeRun *r);

/**
 * Releases a run handle; null is ignored.
 *
 * # Safety
 * `r` must be null or a handle from [`mfbsde_run`] not yet freed.
 */
void mfbsde_run_free(struct MfbsdeRun *r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MFBSDE_H */
