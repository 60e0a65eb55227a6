/* C ABI for the alignlab preference-alignment laboratory. */

#ifndef ALIGNLAB_H
#define ALIGNLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result class of an FFI call.
typedef enum AlignlabStatus {
  // Success; out-parameters are valid.
  ALIGNLAB_STATUS_OK = 0,
  // A required pointer argument was null.
  ALIGNLAB_STATUS_NULL_POINTER = 1,
  // Invalid argument, unreadable file, or malformed data.
  ALIGNLAB_STATUS_INVALID_INPUT = 2,
  // Input was structurally valid but degenerate (for example a
  // single-class training corpus).
  ALIGNLAB_STATUS_DEGENERATE_DATA = 3,
  // A numerical violation: non-finite values or an oversized step.
  ALIGNLAB_STATUS_NUMERICAL_VIOLATION = 4,
  // An internal invariant failed; the library state is still consistent.
  ALIGNLAB_STATUS_INTERNAL = 5,
} AlignlabStatus;

// Opaque handle to a softmax policy.
typedef struct AlignlabPolicy AlignlabPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *alignlab_version(void);

// Message of the most recent failure on this thread (empty string if none).
// Valid until the next failing call on the same thread.
const char *alignlab_last_error_message(void);

// Creates a seeded random-init policy. `vocab >= 2`, `dim >= 1`,
// `init_scale` finite and `> 0`.
//
// # Safety
// `out` must be a valid pointer to a policy-handle slot.
enum AlignlabStatus alignlab_policy_seeded_init(size_t vocab,
                                                size_t dim,
                                                size_t window,
                                                uint64_t feature_seed,
                                                uint64_t init_seed,
                                                double init_scale,
                                                struct AlignlabPolicy **out);

// Loads a policy from a text checkpoint written by [`alignlab_policy_save`].
//
// # Safety
// `path` must be a valid C string; `out` a valid handle slot.
enum AlignlabStatus alignlab_policy_load(const char *path, struct AlignlabPolicy **out);

// Writes the policy to a text checkpoint that round-trips bitwise.
//
// # Safety
// `policy` must be a live handle; `path` a valid C string.
enum AlignlabStatus alignlab_policy_save(const struct AlignlabPolicy *policy, const char *path);

// Deep-copies a policy into a fresh handle.
//
// # Safety
// `policy` must be a live handle; `out` a valid handle slot.
enum AlignlabStatus alignlab_policy_clone(const struct AlignlabPolicy *policy,
                                          struct AlignlabPolicy **out);

// Releases a handle. Null is a no-op. The handle must not be used after.
//
// # Safety
// `policy` must be null or a handle returned by this library, freed at
// most once.
void alignlab_policy_free(struct AlignlabPolicy *policy);

// Vocabulary size of the policy (0 if the handle is null).
//
// # Safety
// `policy` must be null or a live handle.
size_t alignlab_policy_vocab(const struct AlignlabPolicy *policy);

// Feature dimension of the policy (0 if the handle is null).
//
// # Safety
// `policy` must be null or a live handle.
size_t alignlab_policy_dim(const struct AlignlabPolicy *policy);

// Exact log-probability of `tokens` (length `len >= 1`) under the policy
// for the given prompt, written to `out`.
//
// # Safety
// `tokens` must point to `len` readable token ids; `out` must be writable.
enum AlignlabStatus alignlab_policy_sequence_log_prob(const struct AlignlabPolicy *policy,
                                                      uint64_t prompt,
                                                      const uint32_t *tokens,
                                                      size_t len,
                                                      double *out);

// Next-token distribution after `context` (length `context_len`, possibly
// 0). Writes exactly `alignlab_policy_vocab(policy)` probabilities into
// `out_probs`, which must have at least that capacity.
//
// # Safety
// `context` must point to `context_len` readable token ids (or be null
// with length 0); `out_probs` must have vocabulary-size capacity.
enum AlignlabStatus alignlab_policy_next_token_probs(const struct AlignlabPolicy *policy,
                                                     uint64_t prompt,
                                                     const uint32_t *context,
                                                     size_t context_len,
                                                     double *out_probs);

// Greedy decoding for up to `max_len` tokens; generation stops after
// emitting the end token when `eos >= 0`. `capacity` is the size of
// `out_tokens`; it must be at least `max_len`.
//
// # Safety
// Out-pointers must be writable; `out_tokens` must hold `capacity` slots.
enum AlignlabStatus alignlab_policy_greedy_response(const struct AlignlabPolicy *policy,
                                                    uint64_t prompt,
                                                    size_t max_len,
                                                    int64_t eos,
                                                    uint32_t *out_tokens,
                                                    size_t capacity,
                                                    size_t *out_len,
                                                    double *out_log_prob);

// Temperature sampling with an explicit RNG seed: identical seeds give
// identical responses. Other arguments as in
// [`alignlab_policy_greedy_response`].
//
// # Safety
// Out-pointers must be writable; `out_tokens` must hold `capacity` slots.
enum AlignlabStatus alignlab_policy_sample_response(const struct AlignlabPolicy *policy,
                                                    uint64_t prompt,
                                                    double temperature,
                                                    size_t max_len,
                                                    int64_t eos,
                                                    uint64_t rng_seed,
                                                    uint32_t *out_tokens,
                                                    size_t capacity,
                                                    size_t *out_len,
                                                    double *out_log_prob);

// Tie-aware sample weight w(margin) for tie parameter `nu >= 1`; equals
// 1.0 exactly at `nu = 1`.
//
// # Safety
// `out` must be writable.
enum AlignlabStatus alignlab_tie_weight(double nu, double margin, double *out);

// Win/lose/tie probabilities for rewards `(r_i, r_j)` under tie parameter
// `nu >= 1`. The three outputs always sum to 1.
//
// # Safety
// All three out-pointers must be writable.
enum AlignlabStatus alignlab_tie_probabilities(double nu,
                                               double r_i,
                                               double r_j,
                                               double *out_win,
                                               double *out_lose,
                                               double *out_tie);

// One explicit-Euler step of the cross-entropy training flow on a
// probability vector of length `len` toward `target`. Writes the updated
// distribution into `out` (capacity `len`). Fails with the numerical
// status when the step pushes any coordinate out of (0, 1).
//
// # Safety
// `probs` must point to `len` readable values; `out` must hold `len`
// writable slots.
enum AlignlabStatus alignlab_euler_step(const double *probs,
                                        size_t len,
                                        size_t target,
                                        double step,
                                        double *out);

// Derives a purpose-scoped seed from a root seed, matching the library's
// own stream derivation (same purpose string, same result).
//
// # Safety
// `purpose` must be a valid C string; `out` must be writable.
enum AlignlabStatus alignlab_derive_seed(uint64_t seed, const char *purpose, uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ALIGNLAB_H */
