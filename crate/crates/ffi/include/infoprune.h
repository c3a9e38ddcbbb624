#ifndef INFOPRUNE_H
#define INFOPRUNE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every `ip_*` call.
 */
typedef enum IpStatus {
  IP_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8 or an unparsable option string.
   */
  IP_STATUS_INVALID_ARGUMENT = 1,
  /**
   * The archive, plan or configuration failed validation.
   */
  IP_STATUS_VALIDATION = 2,
  /**
   * A file could not be read or written.
   */
  IP_STATUS_IO = 3,
  /**
   * Plan and archive do not belong together.
   */
  IP_STATUS_PLAN_MISMATCH = 4,
  /**
   * Pruned and masked-original outputs differ beyond the tolerance.
   */
  IP_STATUS_VERIFY_FAILED = 5,
  /**
   * A panic was caught at the boundary.
   */
  IP_STATUS_INTERNAL = 6,
} IpStatus;

typedef struct IpModel IpModel;

typedef struct IpPlan IpPlan;

typedef struct IpScores IpScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL if the last call
 * succeeded. Release with `ip_string_free`.
 */
char *ip_last_error_message(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void ip_string_free(char *s);

/**
 * Loads and validates an archive directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum IpStatus ip_model_load(const char *path, struct IpModel **out);

/**
 * Writes `model` as an archive directory.
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum IpStatus ip_model_save(const struct IpModel *model, const char *path);

/**
 * # Safety
 * `model` must be NULL or a handle from this library not yet freed.
 */
void ip_model_free(struct IpModel *model);

/**
 * Hex SHA-256 fingerprint of the archive. Release with `ip_string_free`.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum IpStatus ip_model_fingerprint(const struct IpModel *model, char **out);

/**
 * Total parameters and FLOPs (1 MAC = 1 FLOP).
 *
 * # Safety
 * `model` must be a live handle; both outputs must be writable.
 */
enum IpStatus ip_model_costs(const struct IpModel *model, uint64_t *params, uint64_t *flops);

/**
 * Scores every prunable layer.
 *
 * `m_nearest` 0 means the exact all-pairs similarity. `metric` may be NULL
 * for euclidean.
 *
 * # Safety
 * `model` must be a live handle; `metric` NULL or a NUL-terminated string;
 * `out` must be writable.
 */
enum IpStatus ip_score(const struct IpModel *model,
                       double sigma,
                       size_t m_nearest,
                       const char *metric,
                       struct IpScores **out);

/**
 * # Safety
 * `scores` must be a live handle; `out` must be writable.
 */
enum IpStatus ip_scores_to_json(const struct IpScores *scores, char **out);

/**
 * # Safety
 * `scores` must be NULL or a handle from this library not yet freed.
 */
void ip_scores_free(struct IpScores *scores);

/**
 * Builds a pruning plan.
 *
 * `rates_json` uses the rates file format
 * (`{"global": p, "layers": {id: p}, "protected": [id]}`). `strategy` is
 * `least`, `most` or `random`, NULL meaning `least`.
 *
 * # Safety
 * Handles must be live; strings NULL-terminated (`strategy` may be NULL);
 * `out` must be writable.
 */
enum IpStatus ip_plan_build(const struct IpModel *model,
                            const struct IpScores *scores,
                            const char *rates_json,
                            const char *strategy,
                            uint64_t seed,
                            struct IpPlan **out);

/**
 * # Safety
 * `plan` must be a live handle; `out` must be writable.
 */
enum IpStatus ip_plan_to_json(const struct IpPlan *plan, char **out);

/**
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum IpStatus ip_plan_from_json(const char *json, struct IpPlan **out);

/**
 * # Safety
 * `plan` must be NULL or a handle from this library not yet freed.
 */
void ip_plan_free(struct IpPlan *plan);

/**
 * Applies `plan` to `model` in memory.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum IpStatus ip_apply(const struct IpModel *model,
                       const struct IpPlan *plan,
                       struct IpModel **out);

/**
 * Applies `plan` and writes the pruned archive, with provenance, to `path`.
 *
 * # Safety
 * Handles must be live; `path` must be a NUL-terminated string.
 */
enum IpStatus ip_apply_and_save(const struct IpModel *model,
                                const struct IpPlan *plan,
                                const char *path);

/**
 * Compares `pruned` against `original` with the plan's channels masked on
 * `inputs` seeded random inputs. Writes the largest absolute deviation to
 * `max_dev` and returns `VerifyFailed` when it exceeds `tolerance`.
 *
 * # Safety
 * Handles must be live; `max_dev` must be writable.
 */
enum IpStatus ip_verify(const struct IpModel *original,
                        const struct IpPlan *plan,
                        const struct IpModel *pruned,
                        size_t inputs,
                        uint64_t seed,
                        double tolerance,
                        double *max_dev);

/**
 * Filters kept out of `n` at pruning rate `rate`, i.e. ⌈(1 − rate)·n⌉.
 *
 * # Safety
 * `out` must be writable.
 */
enum IpStatus ip_keep_count(double rate, size_t n, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INFOPRUNE_H */
