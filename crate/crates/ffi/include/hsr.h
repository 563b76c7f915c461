#ifndef HSR_H
#define HSR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible function.
 */
typedef enum HsrStatus {
  HSR_STATUS_OK = 0,
  HSR_STATUS_NULL_POINTER = 1,
  HSR_STATUS_INVALID_UTF8 = 2,
  HSR_STATUS_INVALID_ARGUMENT = 3,
  HSR_STATUS_CONFIG = 4,
  HSR_STATUS_RUNTIME = 5,
  HSR_STATUS_NOT_FOUND = 6,
  HSR_STATUS_PANIC = 7,
} HsrStatus;

/**
 * Vote or classifier label.
 */
typedef enum HsrLabel {
  HSR_LABEL_IN = 0,
  HSR_LABEL_OUT = 1,
} HsrLabel;

/**
 * Opaque experiment handle: a validated configuration plus the report of its
 * last run.
 */
typedef struct HsrExperiment HsrExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string. Do not free.
 */
const char *hsr_version(void);

/**
 * Copy of the last error message on this thread, or null if the last call
 * succeeded. Free with `hsr_string_free`.
 */
char *hsr_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void hsr_string_free(char *s);

/**
 * Worker accuracy on a filter of the given difficulty.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum HsrStatus hsr_skew_accuracy(double base_accuracy, double difficulty, double *out);

/**
 * Posterior P(filter does not apply) after one vote.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum HsrStatus hsr_bayes_filter_update(double prior_in,
                                       double worker_accuracy,
                                       enum HsrLabel vote,
                                       double *out);

/**
 * Probability that an item is screened out from its per-filter IN
 * probabilities.
 *
 * # Safety
 * `in_probs` must point to `n` doubles; `out` must be a valid pointer.
 */
enum HsrStatus hsr_item_out_prob(const double *in_probs, size_t n, double *out);

/**
 * P(accuracy > 0.5) under Beta(alpha, beta).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum HsrStatus hsr_beta_prob_better_than_random(double alpha, double beta, double *out);

/**
 * Naive-Bayes probability that a filter applies given classifier labels.
 *
 * # Safety
 * `labels` and `accuracies` must each point to `n` elements; `out` must be a
 * valid pointer.
 */
enum HsrStatus hsr_nb_ensemble_prob(const enum HsrLabel *labels,
                                    const double *accuracies,
                                    size_t n,
                                    double *out);

/**
 * `(crowd_votes + false_inclusions * expert_cost) / (n_items * expert_cost)`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum HsrStatus hsr_price_ratio(uint64_t crowd_votes,
                               uint64_t false_inclusions,
                               size_t n_items,
                               double expert_cost,
                               double *out);

/**
 * Parses and validates a JSON experiment configuration.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be a valid
 * pointer. The handle is released with `hsr_experiment_free`.
 */
enum HsrStatus hsr_experiment_new(const char *config_json, struct HsrExperiment **out);

/**
 * Releases an experiment handle. Null is ignored.
 *
 * # Safety
 * `exp` must come from `hsr_experiment_new` and not be freed twice.
 */
void hsr_experiment_free(struct HsrExperiment *exp);

/**
 * Overrides the base seed and discards any previous results.
 *
 * # Safety
 * `exp` must be a live handle.
 */
enum HsrStatus hsr_experiment_set_seed(struct HsrExperiment *exp, uint64_t seed);

/**
 * Runs the experiment with `jobs` worker threads (0 = all cores).
 *
 * # Safety
 * `exp` must be a live handle, not used concurrently from another thread.
 */
enum HsrStatus hsr_experiment_run(struct HsrExperiment *exp, size_t jobs);

/**
 * Number of sweep points (1 without a sweep).
 *
 * # Safety
 * `exp` must be a live handle; `out` a valid pointer.
 */
enum HsrStatus hsr_experiment_point_count(struct HsrExperiment *exp, size_t *out);

/**
 * Aggregated results as CSV. Free with `hsr_string_free`.
 *
 * # Safety
 * `exp` must be a live handle; `out` a valid pointer.
 */
enum HsrStatus hsr_experiment_results_csv(struct HsrExperiment *exp, char **out);

/**
 * Mean of one metric for one strategy at sweep point `point`.
 *
 * # Safety
 * `exp` must be a live handle; `strategy` and `metric` NUL-terminated
 * strings; `out` a valid pointer.
 */
enum HsrStatus hsr_experiment_mean(struct HsrExperiment *exp,
                                   const char *strategy,
                                   const char *metric,
                                   size_t point,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HSR_H */
