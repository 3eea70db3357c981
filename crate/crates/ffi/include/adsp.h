#ifndef ADSP_H
#define ADSP_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum AdspStatus {
  ADSP_STATUS_OK = 0,
  // A required pointer argument was null.
  ADSP_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  ADSP_STATUS_INVALID_UTF8 = 2,
  // The configuration could not be parsed or is inconsistent.
  ADSP_STATUS_CONFIG = 3,
  // The requested commit rate cannot be met by some worker.
  ADSP_STATUS_INFEASIBLE = 4,
  // The run itself failed.
  ADSP_STATUS_RUN = 5,
  // The run ended without meeting the convergence rule.
  ADSP_STATUS_NOT_CONVERGED = 6,
  // A panic was caught at the boundary.
  ADSP_STATUS_INTERNAL = 7,
} AdspStatus;

// Parsed experiment configuration.
typedef struct AdspConfig AdspConfig;

// Finished run with its metrics.
typedef struct AdspRun AdspRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *adsp_last_error(void);

// Library version as a static NUL-terminated string.
const char *adsp_version(void);

// Parses a TOML configuration and checks that it resolves.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` a valid pointer.
enum AdspStatus adsp_config_from_toml(const char *toml, struct AdspConfig **out);

// Run id the configuration gets for `seed`, as a string to release with
// [`adsp_string_free`].
//
// # Safety
// `config` must come from [`adsp_config_from_toml`]; `out` must be valid.
enum AdspStatus adsp_config_run_id(const struct AdspConfig *config, uint64_t seed, char **out);

// # Safety
// `config` must come from [`adsp_config_from_toml`] and not be used after.
void adsp_config_free(struct AdspConfig *config);

// Runs the configured experiment in virtual time.
//
// # Safety
// `config` must come from [`adsp_config_from_toml`]; `out` must be valid.
enum AdspStatus adsp_run(const struct AdspConfig *config, uint64_t seed, struct AdspRun **out);

// Virtual time at which the run met its convergence rule.
// Returns `NotConverged` when it never did.
//
// # Safety
// `run` must come from [`adsp_run`]; `out` must be valid.
enum AdspStatus adsp_run_convergence_time(const struct AdspRun *run, double *out);

// # Safety
// `run` must come from [`adsp_run`]; `out` must be valid.
enum AdspStatus adsp_run_final_loss(const struct AdspRun *run, double *out);

// Parameter-server updates applied during the run.
//
// # Safety
// `run` must come from [`adsp_run`]; `out` must be valid.
enum AdspStatus adsp_run_total_steps(const struct AdspRun *run, uint64_t *out);

// Full metrics as JSON, to release with [`adsp_string_free`].
//
// # Safety
// `run` must come from [`adsp_run`]; `out` must be valid.
enum AdspStatus adsp_run_to_json(const struct AdspRun *run, char **out);

// # Safety
// `run` must come from [`adsp_run`] and not be used after.
void adsp_run_free(struct AdspRun *run);

// # Safety
// `s` must be a string returned by this library, or null.
void adsp_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADSP_H */
