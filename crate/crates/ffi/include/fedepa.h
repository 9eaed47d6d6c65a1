#ifndef FEDEPA_H
#define FEDEPA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FedepaStatus {
  FEDEPA_STATUS_OK = 0,
  FEDEPA_STATUS_NULL_POINTER = 1,
  FEDEPA_STATUS_INVALID_UTF8 = 2,
  FEDEPA_STATUS_CONFIG = 3,
  FEDEPA_STATUS_NUMERIC = 4,
  FEDEPA_STATUS_IO = 5,
  FEDEPA_STATUS_PANIC = 6,
} FedepaStatus;

// An experiment description: a base TOML document plus overrides.
typedef struct FedepaExperiment FedepaExperiment;

// The result of one training run.
typedef struct FedepaReport FedepaReport;

typedef struct FedepaMetrics {
  double oa;
  double ba;
  double f1;
} FedepaMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *fedepa_version(void);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `len > 0`). Returns the full message length
// without the terminator, or 0 when there is no error.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t fedepa_last_error(char *buf, size_t len);

// Parses an experiment TOML document (`[run]`, `[data]`, `[sweep]`).
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum FedepaStatus fedepa_experiment_from_toml(const char *toml, struct FedepaExperiment **out);

// The built-in benchmark preset.
//
// # Safety
// `out` must be writable.
enum FedepaStatus fedepa_experiment_benchmark(struct FedepaExperiment **out);

// Applies a `key=value` override. The experiment is unchanged on error.
//
// # Safety
// `exp` must come from this library; `key_value` must be NUL-terminated.
enum FedepaStatus fedepa_experiment_set(struct FedepaExperiment *exp, const char *key_value);

// Trains the experiment (ignoring any sweep axes).
//
// # Safety
// `exp` must come from this library; `out` must be writable.
enum FedepaStatus fedepa_experiment_run(const struct FedepaExperiment *exp,
                                        struct FedepaReport **out);

// # Safety
// `exp` must be null or come from this library, and not be used again.
void fedepa_experiment_free(struct FedepaExperiment *exp);

// Mean final-round metrics over clients.
//
// # Safety
// `report` must come from this library; `out` must be writable.
enum FedepaStatus fedepa_report_metrics(const struct FedepaReport *report,
                                        struct FedepaMetrics *out);

// Number of completed rounds.
//
// # Safety
// `report` must come from this library; `out` must be writable.
enum FedepaStatus fedepa_report_rounds(const struct FedepaReport *report, size_t *out);

// The report as JSON. Release the string with [`fedepa_string_free`].
// With `include_timing = false` the output is identical across repeated
// runs of one seed.
//
// # Safety
// `report` must come from this library; `out` must be writable.
enum FedepaStatus fedepa_report_json(const struct FedepaReport *report,
                                     bool include_timing,
                                     char **out);

// # Safety
// `report` must be null or come from this library, and not be used again.
void fedepa_report_free(struct FedepaReport *report);

// # Safety
// `s` must be null or a string returned by this library.
void fedepa_string_free(char *s);

// OA, BA and macro F1 of a row-major `classes x classes` confusion matrix
// (rows are true classes).
//
// # Safety
// `counts` must point to `classes * classes` values; `out` must be writable.
enum FedepaStatus fedepa_metrics_from_confusion(const uint64_t *counts,
                                                size_t classes,
                                                struct FedepaMetrics *out);

// Runs the built-in checks; `passed` receives how many succeeded and
// `total` how many ran. Returns `Numeric` if any failed.
//
// # Safety
// `passed` and `total` must be writable.
enum FedepaStatus fedepa_selftest(size_t *passed, size_t *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDEPA_H */
