#ifndef WEBNAV_H
#define WEBNAV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum WebnavStatus {
  WEBNAV_STATUS_OK = 0,
  WEBNAV_STATUS_NULL_POINTER = 1,
  WEBNAV_STATUS_INVALID_ARGUMENT = 2,
  WEBNAV_STATUS_UNKNOWN_TASK = 3,
  WEBNAV_STATUS_EPISODE_TERMINATED = 4,
  WEBNAV_STATUS_IO = 5,
  WEBNAV_STATUS_PARSE = 6,
  WEBNAV_STATUS_INTERNAL = 7,
} WebnavStatus;

/**
 * A running episode.
 */
typedef struct WebnavEnv WebnavEnv;

/**
 * A policy that can play episodes.
 */
typedef struct WebnavPolicy WebnavPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *webnav_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a pointer obtained from this library and not yet freed.
 */
void webnav_string_free(char *s);

/**
 * Starts an episode of `task` with the given seed.
 *
 * # Safety
 * `task` must be a NUL-terminated string and `out` writable.
 */
enum WebnavStatus webnav_env_new(const char *task,
                                 uint64_t seed,
                                 bool randomized_refs,
                                 struct WebnavEnv **out);

/**
 * # Safety
 * `env` must be null or a live handle from [`webnav_env_new`].
 */
void webnav_env_free(struct WebnavEnv *env);

/**
 * # Safety
 * `env` must be a live handle and `out` writable.
 */
enum WebnavStatus webnav_env_utterance(const struct WebnavEnv *env, char **out);

/**
 * The current page in the flattened text form the policy reads.
 *
 * # Safety
 * `env` must be a live handle and `out` writable.
 */
enum WebnavStatus webnav_env_serialized_dom(const struct WebnavEnv *env, char **out);

/**
 * Applies an action written as `click ref N` or `type_text ref N text`.
 *
 * # Safety
 * `env` must be a live handle, `action` a NUL-terminated string, and
 * `reward` and `terminated` writable.
 */
enum WebnavStatus webnav_env_step(struct WebnavEnv *env,
                                  const char *action,
                                  double *reward,
                                  bool *terminated);

/**
 * The scripted solver's next action for the current state.
 *
 * # Safety
 * `env` must be a live handle and `out` writable.
 */
enum WebnavStatus webnav_env_oracle_action(const struct WebnavEnv *env, char **out);

/**
 * Cleans one raw demonstration (JSON) into a processed episode (JSON).
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` writable.
 */
enum WebnavStatus webnav_clean_demonstration_json(const char *json, char **out);

/**
 * Splits an utterance into subtasks, written as `a; b;`.
 *
 * # Safety
 * `task` and `utterance` must be NUL-terminated strings and `out` writable.
 */
enum WebnavStatus webnav_translate_utterance(const char *task, const char *utterance, char **out);

/**
 * ROUGE-1 and ROUGE-L F1 over whitespace-separated tokens.
 *
 * # Safety
 * `candidate` and `reference` must be NUL-terminated strings and the
 * score pointers writable.
 */
enum WebnavStatus webnav_rouge(const char *candidate,
                               const char *reference,
                               double *rouge1_f1,
                               double *rouge_l_f1);

/**
 * The scripted solver as a policy.
 *
 * # Safety
 * `out` must be writable.
 */
enum WebnavStatus webnav_policy_oracle(struct WebnavPolicy **out);

/**
 * Loads a trained checkpoint and the vocabulary file stored beside it.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum WebnavStatus webnav_policy_load(const char *path, struct WebnavPolicy **out);

/**
 * # Safety
 * `policy` must be null or a live policy handle.
 */
void webnav_policy_free(struct WebnavPolicy *policy);

/**
 * Plays one full episode with the rule-based plan and reports the outcome.
 *
 * # Safety
 * `policy` must be a live handle, `task` a NUL-terminated string, and
 * `success` and `reward` writable.
 */
enum WebnavStatus webnav_policy_run_episode(const struct WebnavPolicy *policy,
                                            const char *task,
                                            uint64_t seed,
                                            bool randomized_refs,
                                            bool *success,
                                            double *reward);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WEBNAV_H */
