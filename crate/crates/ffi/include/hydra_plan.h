#ifndef HYDRA_PLAN_H
#define HYDRA_PLAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum {
  HP_STATUS_OK = 0,
  HP_STATUS_NULL_POINTER = 1,
  HP_STATUS_INVALID_ARGUMENT = 2,
  HP_STATUS_CONFIG = 3,
  HP_STATUS_SHAPE = 4,
  HP_STATUS_NON_FINITE = 5,
  HP_STATUS_INTEGRITY = 6,
  HP_STATUS_FORMAT = 7,
  HP_STATUS_IO = 8,
  HP_STATUS_PANIC = 9,
} HpStatus;

/**
 * Trained student network.
 */
typedef struct HpModel HpModel;

/**
 * Generated driving scenario.
 */
typedef struct HpScenario HpScenario;

/**
 * Planning vocabulary.
 */
typedef struct HpVocabulary HpVocabulary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the
 * library; valid until the next call on the same thread.
 */
const char *hp_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hp_version(void);

/**
 * Number of sub-metrics per vocabulary entry: NC, DAC, TTC, C, EP.
 */
uintptr_t hp_num_metrics(void);

/**
 * Generate a scenario with the default world settings.
 *
 * # Safety
 * `out` must be a valid pointer to writable handle storage.
 */
HpStatus hp_scenario_generate(uint64_t seed, HpScenario **out);

/**
 * # Safety
 * `scenario` must be null or a handle from `hp_scenario_generate`.
 */
void hp_scenario_free(HpScenario *scenario);

/**
 * Scenario as a JSON document. Release the string with `hp_string_free`.
 *
 * # Safety
 * `scenario` must be a live handle and `out` writable.
 */
HpStatus hp_scenario_to_json(const HpScenario *scenario, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void hp_string_free(char *s);

/**
 * Render the noisy bird's-eye observation of a scenario with default noise
 * settings. `raster` receives `2 × grid × grid` values (channel-major),
 * `ego_status` four values (speed, yaw rate, acceleration, lateral offset).
 *
 * # Safety
 * `raster` must hold `raster_len` doubles and `ego_status` four.
 */
HpStatus hp_observation_render(const HpScenario *scenario,
                               uint64_t seed,
                               double *raster,
                               uintptr_t raster_len,
                               double *ego_status);

/**
 * Raster length produced by `hp_observation_render` (default grid).
 */
uintptr_t hp_observation_raster_len(void);

/**
 * Load a vocabulary file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
HpStatus hp_vocabulary_load(const char *path, HpVocabulary **out);

/**
 * # Safety
 * `vocab` must be null or a handle from `hp_vocabulary_load`.
 */
void hp_vocabulary_free(HpVocabulary *vocab);

/**
 * Number of entries, or 0 for a null handle.
 *
 * # Safety
 * `vocab` must be null or a live handle.
 */
uintptr_t hp_vocabulary_len(const HpVocabulary *vocab);

/**
 * Poses `(x, y, heading)` of entry `index` in the ego frame, `3 × horizon`
 * values.
 *
 * # Safety
 * `poses` must hold `len` doubles.
 */
HpStatus hp_vocabulary_entry(const HpVocabulary *vocab,
                             uintptr_t index,
                             double *poses,
                             uintptr_t len);

/**
 * Teacher sub-scores of every vocabulary entry in a scenario, row-major
 * `k × 5` in the order NC, DAC, TTC, C, EP.
 *
 * # Safety
 * `scores` must hold `len` doubles.
 */
HpStatus hp_simulate(const HpScenario *scenario,
                     const HpVocabulary *vocab,
                     double *scores,
                     uintptr_t len);

/**
 * Aggregate score `nc · dac · (5 ttc + 2 c + 5 ep) / 12` of one sub-score
 * row (NC, DAC, TTC, C, EP).
 *
 * # Safety
 * `sub` must hold five doubles and `out` be writable.
 */
HpStatus hp_pdm_score(const double *sub, double *out);

/**
 * Load a student checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
HpStatus hp_model_load(const char *path, HpModel **out);

/**
 * # Safety
 * `model` must be null or a handle from `hp_model_load`.
 */
void hp_model_free(HpModel *model);

/**
 * Number of metric heads (5 for multi-target students, 1 for PDM-only).
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t hp_model_num_heads(const HpModel *model);

/**
 * Score every vocabulary entry. `imitation` receives `k` probabilities,
 * `metric_scores` `k × num_heads` values.
 *
 * # Safety
 * Buffers must hold the stated number of doubles; `ego_status` four.
 */
HpStatus hp_model_forward(const HpModel *model,
                          const HpVocabulary *vocab,
                          const double *raster,
                          uintptr_t raster_len,
                          const double *ego_status,
                          double *imitation,
                          uintptr_t k,
                          double *metric_scores,
                          uintptr_t metric_len);

/**
 * Index minimising the assembled cost; lowest index wins ties.
 * `num_heads` is 5 or 1; `weights` holds w1..w4.
 *
 * # Safety
 * `imitation` must hold `k` doubles, `metric_scores` `k × num_heads`,
 * `weights` four; `out_index` must be writable.
 */
HpStatus hp_select(const double *imitation,
                   const double *metric_scores,
                   uintptr_t k,
                   uintptr_t num_heads,
                   const double *weights,
                   uintptr_t *out_index);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYDRA_PLAN_H */
