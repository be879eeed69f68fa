#ifndef BALANCEKIT_H
#define BALANCEKIT_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Opaque network handle.
 */
typedef struct BkNetwork BkNetwork;

typedef int32_t BkStatus;

/**
 * Outcome of `bk_run_balancing`.
 */
typedef struct BkBalanceSummary {
  double r_before;
  double r_after;
  size_t steps;
  double residual;
  bool converged;
} BkBalanceSummary;

#define BK_OK 0

#define BK_NULL_POINTER 1

#define BK_INVALID_UTF8 2

#define BK_PARSE 3

#define BK_INVALID_NETWORK 4

#define BK_INVALID_ARGUMENT 5

/**
 * The call finished but the iteration did not reach its tolerance.
 */
#define BK_NOT_CONVERGED 6

#define BK_BUFFER_TOO_SMALL 7

/**
 * A panic was caught at the boundary.
 */
#define BK_INTERNAL 99

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *bk_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bk_version(void);

/**
 * Parses a network document and stores a new handle in `*out`.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a writable pointer.
 */
BkStatus bk_network_from_json(const char *json, struct BkNetwork **out);

/**
 * Serializes the network; free `*out` with `bk_string_free`.
 *
 * # Safety
 * `net` must be a live handle and `out` a writable pointer.
 */
BkStatus bk_network_to_json(const struct BkNetwork *net, char **out);

/**
 * # Safety
 * `net` must be NULL or a handle from `bk_network_from_json` not yet freed.
 */
void bk_network_free(struct BkNetwork *net);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library not yet freed.
 */
void bk_string_free(char *s);

/**
 * # Safety
 * `net` must be a live handle and `out` writable.
 */
BkStatus bk_network_num_units(const struct BkNetwork *net, size_t *out);

/**
 * # Safety
 * `net` must be a live handle and `out` writable.
 */
BkStatus bk_network_num_edges(const struct BkNetwork *net, size_t *out);

/**
 * Copies the edge weights, in document order, into `buf[0..num_edges]`.
 *
 * # Safety
 * `buf` must point to `len` writable doubles.
 */
BkStatus bk_network_weights(const struct BkNetwork *net, double *buf, size_t len);

/**
 * Evaluates the network on one input vector.
 *
 * # Safety
 * `input` must point to `n_in` doubles and `output` to `n_out` writable doubles.
 */
BkStatus bk_network_forward(const struct BkNetwork *net,
                            const double *input,
                            size_t n_in,
                            double *output,
                            size_t n_out);

/**
 * Total weight cost under the cost spec string, e.g. `"l2"` or `"l1+0.5*l2"`.
 *
 * # Safety
 * `cost` must be NUL-terminated and `out` writable.
 */
BkStatus bk_network_cost(const struct BkNetwork *net, const char *cost, double *out);

/**
 * Sum of the per-unit balance deficits.
 *
 * # Safety
 * `cost` must be NUL-terminated and `out` writable.
 */
BkStatus bk_network_deficit(const struct BkNetwork *net, const char *cost, double *out);

/**
 * Balances one hidden unit in place and writes the applied multiplier to
 * `*lambda_out` (may be NULL).
 *
 * # Safety
 * `net` must be a live handle and `cost` NUL-terminated.
 */
BkStatus bk_balance_neuron(struct BkNetwork *net,
                           size_t unit,
                           const char *cost,
                           double *lambda_out);

/**
 * Runs a balancing schedule (`"stochastic:<seed>"`, `"sequential"`,
 * `"layer"`, `"layer-tied"` or `"partial"`) in place. Returns
 * `BK_NOT_CONVERGED` when the step budget runs out; the network is still
 * updated. `summary` may be NULL.
 *
 * # Safety
 * `net` must be a live handle; string arguments NUL-terminated.
 */
BkStatus bk_run_balancing(struct BkNetwork *net,
                          const char *schedule,
                          const char *cost,
                          double tol,
                          size_t max_steps,
                          struct BkBalanceSummary *summary);

/**
 * Replaces the network with its balanced state computed directly by convex
 * minimization, writing the minimal cost to `*r_star` (may be NULL).
 *
 * # Safety
 * `net` must be a live handle and `cost` NUL-terminated.
 */
BkStatus bk_solve_convex(struct BkNetwork *net, const char *cost, double *r_star);

/**
 * Factors `M_i` with product 1 that equalize `M_i²·norms[i]` across a chain
 * of linear layers, where `norms[i]` is the squared norm of layer `i`.
 *
 * # Safety
 * `norms` must point to `n` doubles and `out` to `n` writable doubles.
 */
BkStatus bk_tied_layer_closed_form(const double *norms, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BALANCEKIT_H */
