#ifndef CITADEL_H
#define CITADEL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CitadelStatus {
  CITADEL_OK = 0,
  CITADEL_NULL_POINTER = 1,
  CITADEL_INVALID_UTF8 = 2,
  CITADEL_INVALID_CONFIG = 3,
  CITADEL_UNKNOWN_TEMPLATE = 4,
  CITADEL_PRIVACY_VIOLATION = 5,
  CITADEL_ATTESTATION_FAILED = 6,
  CITADEL_JOB_FAILED = 7,
  CITADEL_BUFFER_TOO_SMALL = 8,
  CITADEL_INVALID_ARGUMENT = 9,
  CITADEL_PANIC = 10,
} CitadelStatus;

// A validated job configuration.
typedef struct CitadelConfig CitadelConfig;

// The outcome of a finished job.
typedef struct CitadelJob CitadelJob;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread (no terminator).
//
// # Safety
// `buf` must hold `cap` writable bytes; `len` must be writable.
enum CitadelStatus citadel_last_error(uint8_t *buf, size_t cap, size_t *len);

// Parses and validates a TOML job config.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum CitadelStatus citadel_config_from_toml(const char *toml, struct CitadelConfig **out);

// Builds one of the `mask`, `tree` or `ssp` templates.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum CitadelStatus citadel_config_template(const char *name, struct CitadelConfig **out);

// # Safety
// `cfg` must be a live handle.
enum CitadelStatus citadel_config_set_seed(struct CitadelConfig *cfg, uint64_t seed);

// Writes the config back out as TOML.
//
// # Safety
// `cfg` must be a live handle; `buf` must hold `cap` bytes; `len` writable.
enum CitadelStatus citadel_config_to_toml(const struct CitadelConfig *cfg,
                                          uint8_t *buf,
                                          size_t cap,
                                          size_t *len);

// # Safety
// `cfg` must be null or a handle not yet freed.
void citadel_config_free(struct CitadelConfig *cfg);

// Mask-mode and tree-mode iteration estimates for `n` enclaves and fan-out `c`.
//
// # Safety
// `cfg` must be a live handle; outputs must be writable.
enum CitadelStatus citadel_estimate(const struct CitadelConfig *cfg,
                                    size_t n,
                                    size_t c,
                                    uint64_t *mask,
                                    uint64_t *tree);

// Runs a whole job to completion.
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum CitadelStatus citadel_run_job(const struct CitadelConfig *cfg, struct CitadelJob **out);

// # Safety
// `job` must be a live handle; `out` must be writable.
enum CitadelStatus citadel_job_accuracy(const struct CitadelJob *job, double *out);

// Total simulated time of the job.
//
// # Safety
// `job` must be a live handle; `out` must be writable.
enum CitadelStatus citadel_job_total_time(const struct CitadelJob *job, uint64_t *out);

// Number of committed iterations.
//
// # Safety
// `job` must be a live handle; `out` must be writable.
enum CitadelStatus citadel_job_iterations(const struct CitadelJob *job, uint64_t *out);

// The metrics CSV (no terminator).
//
// # Safety
// `job` must be a live handle; `buf` must hold `cap` bytes; `len` writable.
enum CitadelStatus citadel_job_metrics_csv(const struct CitadelJob *job,
                                           uint8_t *buf,
                                           size_t cap,
                                           size_t *len);

// The final encrypted model blob as stored.
//
// # Safety
// `job` must be a live handle; `buf` must hold `cap` bytes; `len` writable.
enum CitadelStatus citadel_job_model_blob(const struct CitadelJob *job,
                                          uint8_t *buf,
                                          size_t cap,
                                          size_t *len);

// # Safety
// `job` must be null or a handle not yet freed.
void citadel_job_free(struct CitadelJob *job);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CITADEL_H */
