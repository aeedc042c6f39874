#ifndef INFOVLA_H
#define INFOVLA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum InfovlaPreset {
  INFOVLA_PRESET_CI = 0,
  INFOVLA_PRESET_LONG = 1,
} InfovlaPreset;

/**
 * Result code of every fallible call.
 */
typedef enum InfovlaStatus {
  INFOVLA_STATUS_OK = 0,
  INFOVLA_STATUS_NULL_POINTER = 1,
  /**
   * Bad argument value or non-UTF-8 string.
   */
  INFOVLA_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Config failed validation.
   */
  INFOVLA_STATUS_CONFIG = 3,
  /**
   * Malformed input file or text.
   */
  INFOVLA_STATUS_FORMAT = 4,
  /**
   * Non-finite value during training or evaluation.
   */
  INFOVLA_STATUS_NUMERICAL = 5,
  INFOVLA_STATUS_IO = 6,
  /**
   * Requested cell is undefined in the success matrix.
   */
  INFOVLA_STATUS_UNDEFINED = 7,
  /**
   * Internal contract or shape violation.
   */
  INFOVLA_STATUS_INTERNAL = 8,
  /**
   * A Rust panic was caught at the boundary.
   */
  INFOVLA_STATUS_PANIC = 9,
} InfovlaStatus;

typedef enum InfovlaStrategy {
  INFOVLA_STRATEGY_MULTITASK = 0,
  INFOVLA_STRATEGY_SEQUENTIAL = 1,
  INFOVLA_STRATEGY_ER = 2,
  INFOVLA_STRATEGY_EWC = 3,
  INFOVLA_STRATEGY_INFOVLA = 4,
} InfovlaStrategy;

/**
 * Opaque experiment config.
 */
typedef struct InfovlaConfig InfovlaConfig;

/**
 * Opaque success matrix.
 */
typedef struct InfovlaMatrix InfovlaMatrix;

/**
 * Scalar continual-learning metrics, as fractions in [0, 1].
 */
typedef struct InfovlaMetrics {
  double auc;
  double fwt;
  double nbt;
  double faa;
  double aa;
} InfovlaMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *infovla_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *infovla_version(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library.
 */
void infovla_string_free(char *s);

/**
 * Builds a matrix from row-major `values` of `tasks × stages` cells;
 * `defined[i]` nonzero marks cell `i` as defined.
 *
 * # Safety
 * `values` and `defined` must point to `tasks * stages` elements; `out` must
 * be writable.
 */
enum InfovlaStatus infovla_matrix_new(size_t tasks,
                                      size_t stages,
                                      const double *values,
                                      const uint8_t *defined,
                                      struct InfovlaMatrix **out);

/**
 * Parses R.csv text.
 *
 * # Safety
 * `csv` must be a NUL-terminated string; `out` must be writable.
 */
enum InfovlaStatus infovla_matrix_from_csv(const char *csv, struct InfovlaMatrix **out);

/**
 * Reads an R.csv file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum InfovlaStatus infovla_matrix_read(const char *path, struct InfovlaMatrix **out);

/**
 * # Safety
 * `m` must be NULL or a handle from this library not yet freed.
 */
void infovla_matrix_free(struct InfovlaMatrix *m);

/**
 * # Safety
 * `m` must be a live handle; `tasks` and `stages` must be writable.
 */
enum InfovlaStatus infovla_matrix_shape(const struct InfovlaMatrix *m,
                                        size_t *tasks,
                                        size_t *stages);

/**
 * Cell `(task, stage)`; returns `Undefined` for cells before the task's
 * first stage.
 *
 * # Safety
 * `m` must be a live handle; `out` must be writable.
 */
enum InfovlaStatus infovla_matrix_get(const struct InfovlaMatrix *m,
                                      size_t task,
                                      size_t stage,
                                      double *out);

/**
 * R.csv text of the matrix; free with [`infovla_string_free`].
 *
 * # Safety
 * `m` must be a live handle; `out` must be writable.
 */
enum InfovlaStatus infovla_matrix_to_csv(const struct InfovlaMatrix *m, char **out);

/**
 * # Safety
 * `m` must be a live handle; `out` must be writable.
 */
enum InfovlaStatus infovla_matrix_metrics(const struct InfovlaMatrix *m,
                                          struct InfovlaMetrics *out);

/**
 * Average accuracy from per-stage "All" averages.
 *
 * # Safety
 * `averages` must point to `n` values; `out` must be writable.
 */
enum InfovlaStatus infovla_aa_from_stage_averages(const double *averages, size_t n, double *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum InfovlaStatus infovla_config_preset(enum InfovlaPreset preset, struct InfovlaConfig **out);

/**
 * Parses and validates a JSON config.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum InfovlaStatus infovla_config_from_json(const char *json, struct InfovlaConfig **out);

/**
 * # Safety
 * `c` must be a live handle; `out` must be writable.
 */
enum InfovlaStatus infovla_config_to_json(const struct InfovlaConfig *c, char **out);

/**
 * # Safety
 * `c` must be a live handle.
 */
enum InfovlaStatus infovla_config_set_strategy(struct InfovlaConfig *c,
                                               enum InfovlaStrategy strategy);

/**
 * # Safety
 * `c` must be a live handle; `seeds` must point to `n` values.
 */
enum InfovlaStatus infovla_config_set_seeds(struct InfovlaConfig *c,
                                            const uint64_t *seeds,
                                            size_t n);

/**
 * # Safety
 * `c` must be a live handle; `dir` must be a NUL-terminated string.
 */
enum InfovlaStatus infovla_config_set_output_dir(struct InfovlaConfig *c, const char *dir);

/**
 * # Safety
 * `c` must be a live handle.
 */
enum InfovlaStatus infovla_config_set_iterations(struct InfovlaConfig *c,
                                                 size_t base,
                                                 size_t incremental);

/**
 * # Safety
 * `c` must be a live handle.
 */
enum InfovlaStatus infovla_config_validate(const struct InfovlaConfig *c);

/**
 * # Safety
 * `c` must be NULL or a handle from this library not yet freed.
 */
void infovla_config_free(struct InfovlaConfig *c);

/**
 * Runs every seed of the configured strategy into the output directory and
 * writes the seed-mean metrics to `mean`. Blocks until done.
 *
 * # Safety
 * `c` must be a live handle; `mean` must be writable.
 */
enum InfovlaStatus infovla_run(const struct InfovlaConfig *c, struct InfovlaMetrics *mean);

/**
 * Runs the finite-difference gradient suite; `all_passed` receives 1 when
 * every case is within tolerance.
 *
 * # Safety
 * `all_passed` must be writable.
 */
enum InfovlaStatus infovla_gradcheck(size_t instances, uint64_t seed, int32_t *all_passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INFOVLA_H */
