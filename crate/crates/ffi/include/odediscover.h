#ifndef ODEDISCOVER_H
#define ODEDISCOVER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum OddStatus {
  ODD_STATUS_OK = 0,
  ODD_STATUS_NULL_POINTER = 1,
  ODD_STATUS_INVALID_ARGUMENT = 2,
  ODD_STATUS_IO = 3,
  ODD_STATUS_PARSE = 4,
  ODD_STATUS_DIVERGED = 5,
  ODD_STATUS_NUMERICAL = 6,
  ODD_STATUS_ALL_CONFIGS_FAILED = 7,
  ODD_STATUS_PANIC = 8,
} OddStatus;

/**
 * Opaque dataset handle.
 */
typedef struct OddDataset OddDataset;

/**
 * Opaque model handle.
 */
typedef struct OddModel OddModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy of the calling thread's last error message, or null when none.
 * Release with [`odd_string_free`].
 */
char *odd_last_error(void);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void odd_string_free(char *s);

/**
 * Library version as a static string.
 */
const char *odd_version(void);

/**
 * Simulate `n_tasks` trajectories of `system` ("pendulum", "predator_prey",
 * "sir", "complex_ode") in `split` ("id", "ood-x0", "ood-x0-w") with the
 * system's default grid; a negative `noise` selects the default noise.
 *
 * # Safety
 * Strings must be nul-terminated; `out` must be writable.
 */
enum OddStatus odd_dataset_generate(const char *system,
                                    const char *split,
                                    size_t n_tasks,
                                    double noise,
                                    uint64_t seed,
                                    struct OddDataset **out);

/**
 * # Safety
 * `dir` must be nul-terminated; `out` must be writable.
 */
enum OddStatus odd_dataset_load(const char *dir, struct OddDataset **out);

/**
 * # Safety
 * `data` must be a live handle; `dir` must be nul-terminated.
 */
enum OddStatus odd_dataset_save(const struct OddDataset *data, const char *dir);

/**
 * Number of tasks, or 0 for a null handle.
 *
 * # Safety
 * `data` must be null or a live handle.
 */
size_t odd_dataset_n_tasks(const struct OddDataset *data);

/**
 * State dimension, or 0 for a null handle.
 *
 * # Safety
 * `data` must be null or a live handle.
 */
size_t odd_dataset_dim(const struct OddDataset *data);

/**
 * # Safety
 * `data` must be null or a handle not yet freed.
 */
void odd_dataset_free(struct OddDataset *data);

/**
 * Train the default hyperparameter grid on `train` (its last 20% of tasks
 * validate) and return the selected model. `epochs == 0` keeps the default.
 *
 * # Safety
 * `train` must be a live handle; `out` must be writable.
 */
enum OddStatus odd_sweep(const struct OddDataset *train,
                         size_t epochs,
                         uint64_t seed,
                         struct OddModel **out);

/**
 * # Safety
 * `path` must be nul-terminated; `out` must be writable.
 */
enum OddStatus odd_model_load(const char *path, struct OddModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` must be nul-terminated.
 */
enum OddStatus odd_model_save(const struct OddModel *model, const char *path);

/**
 * Number of open gates, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t odd_model_n_active(const struct OddModel *model);

/**
 * Symbolic equations of the model with coefficient placeholders.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum OddStatus odd_model_equation(const struct OddModel *model, char **out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void odd_model_free(struct OddModel *model);

/**
 * Adapt to an observed prefix and forecast from its last state.
 *
 * `prefix` holds `n_rows x d` row-major states sampled every `dt`;
 * `out` receives `(horizon_steps + 1) x d` states, the first row being
 * the last prefix state.
 *
 * # Safety
 * `prefix` must hold `n_rows * d` values and `out` `(horizon_steps + 1) * d`.
 */
enum OddStatus odd_adapt_forecast(const struct OddModel *model,
                                  const double *prefix,
                                  size_t n_rows,
                                  size_t d,
                                  double dt,
                                  size_t horizon_steps,
                                  double *out);

/**
 * Adapt and score every task of `test`; writes the mean NRMSE over
 * scored tasks (NaN when none) and the NaN* count.
 *
 * # Safety
 * Handles must be live; out-pointers must be writable.
 */
enum OddStatus odd_evaluate(const struct OddModel *model,
                            const struct OddDataset *test,
                            uint64_t seed,
                            double *mean_nrmse,
                            size_t *nan_star_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ODEDISCOVER_H */
