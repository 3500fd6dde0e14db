#ifndef TASKGEN_H
#define TASKGEN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TgStatus {
  TG_STATUS_OK = 0,
  TG_STATUS_NULL_ARGUMENT = 1,
  TG_STATUS_INVALID_UTF8 = 2,
  TG_STATUS_INVALID_INPUT = 3,
  // The interpreter or a working directory could not be set up.
  TG_STATUS_SANDBOX_SETUP = 4,
  TG_STATUS_PANIC = 5,
} TgStatus;

// Opaque sandbox handle.
typedef struct TgSandbox TgSandbox;

typedef struct TgAgreement {
  size_t n;
  double pa;
  double pi_hat;
  double pe;
  double ac1;
} TgAgreement;

typedef struct TgLikert {
  size_t n;
  double mean;
  // Sample standard deviation; meaningful only when `has_sd` is set.
  double sd;
  bool has_sd;
  // Counts of the levels 1 through 5.
  uint64_t histogram[5];
} TgLikert;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *tg_last_error_message(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed already.
void tg_string_free(char *s);

// Creates a sandbox running `interpreter` (null means `python3`) with at
// most `max_concurrent` children at once (0 means 1).
//
// # Safety
// `interpreter` is null or a NUL-terminated string; `out` is writable.
enum TgStatus tg_sandbox_new(const char *interpreter,
                             uint32_t max_concurrent,
                             struct TgSandbox **out);

// Runs `solution` against `tests` and writes the outcome as a JSON object
// to `out_json`. Zero limits select the defaults.
//
// # Safety
// `sandbox` comes from [`tg_sandbox_new`]; strings are NUL-terminated;
// `out_json` is writable.
enum TgStatus tg_sandbox_run(const struct TgSandbox *sandbox,
                             const char *solution,
                             const char *tests,
                             uint64_t wall_timeout_ms,
                             size_t max_output_bytes,
                             char **out_json);

// # Safety
// `sandbox` is null or comes from [`tg_sandbox_new`] and is not used again.
void tg_sandbox_free(struct TgSandbox *sandbox);

// Strips Markdown code fences from model output.
//
// # Safety
// `text` is NUL-terminated; `out` is writable.
enum TgStatus tg_sanitize_source(const char *text, char **out);

// Gwet's AC1 for two raters over `n` binary judgements.
//
// # Safety
// `a` and `b` point to `n` values each; `out` is writable.
enum TgStatus tg_gwet_ac1(const bool *a, const bool *b, size_t n, struct TgAgreement *out);

// Mean, sample standard deviation and histogram of 1..=5 ratings.
//
// # Safety
// `values` points to `n` values; `out` is writable.
enum TgStatus tg_likert_summary(const uint8_t *values, size_t n, struct TgLikert *out);

// Whether an execution outcome, given as JSON, counts as functional.
//
// # Safety
// `outcome_json` is NUL-terminated; `out` is writable.
enum TgStatus tg_evaluate_e1(const char *outcome_json, bool *out);

// Trims, deduplicates and bounds a generation request given as JSON.
//
// # Safety
// `request_json` is NUL-terminated; `out_json` is writable.
enum TgStatus tg_normalize_request(const char *request_json, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TASKGEN_H */
