/* C interface to the wealthshare simulation library. */

#ifndef WEALTHSHARE_H
#define WEALTHSHARE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum WsStatus {
  WS_STATUS_OK = 0,
  WS_STATUS_NULL_POINTER = 1,
  WS_STATUS_INVALID_ARGUMENT = 2,
  WS_STATUS_RUNTIME = 3,
  WS_STATUS_PANIC = 4,
} WsStatus;

// Opaque model parameters.
typedef struct WsParams WsParams;

// Opaque running replica.
typedef struct WsSimulation WsSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread, or NULL.
// The pointer stays valid until the next failing call on the same thread.
const char *ws_last_error_message(void);

// New parameter set with the binary half-doubling factor distribution,
// default floor, and no redistribution. Returns NULL on invalid input.
struct WsParams *ws_params_new(size_t agents, double flat_rate, double progressivity);

enum WsStatus ws_params_set_redistribution(struct WsParams *params, double redistribution);

enum WsStatus ws_params_set_floor(struct WsParams *params, double floor);

// Switch between taxing accumulated wealth (0) and annual gains (1).
enum WsStatus ws_params_set_tax_gains(struct WsParams *params, int32_t gains);

// Replace the growth factor distribution with `len` (factor, probability)
// atoms.
enum WsStatus ws_params_set_factors(struct WsParams *params,
                                    const double *factors,
                                    const double *probabilities,
                                    size_t len);

// # Safety
// `params` must come from [`ws_params_new`] and not have been freed.
void ws_params_free(struct WsParams *params);

// New replica with uniform random initial shares drawn from the stream
// derived from (master_seed, replica).
enum WsStatus ws_simulation_new(const struct WsParams *params,
                                uint64_t master_seed,
                                uint64_t replica,
                                struct WsSimulation **out);

// Advance the replica by `years` years.
enum WsStatus ws_simulation_advance(struct WsSimulation *sim, uint64_t years);

// Years simulated so far.
uint64_t ws_simulation_year(const struct WsSimulation *sim);

// Share at the given rank (1 = richest), as a double.
enum WsStatus ws_simulation_share(const struct WsSimulation *sim, size_t rank, double *out);

// -ln of the share at the given rank, valid down to the share floor.
enum WsStatus ws_simulation_neg_log_share(const struct WsSimulation *sim, size_t rank, double *out);

// Sum of all shares but the richest (the residual share).
enum WsStatus ws_simulation_residual_share(const struct WsSimulation *sim, double *out);

// # Safety
// `sim` must come from [`ws_simulation_new`] and not have been freed.
void ws_simulation_free(struct WsSimulation *sim);

// Deterministic mean-field steady state via ranking-function relaxation.
// Fills `out` (length `params.agents`) with the descending share list.
enum WsStatus ws_meanfield_steady_shares(const struct WsParams *params,
                                         double tolerance,
                                         uint64_t max_iterations,
                                         double *out,
                                         size_t out_len);

// Mean-field steady state via the duplicate-order-average procedure.
enum WsStatus ws_meanfield_duplicate_shares(const struct WsParams *params,
                                            double tolerance,
                                            uint64_t max_iterations,
                                            double *out,
                                            size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WEALTHSHARE_H */
