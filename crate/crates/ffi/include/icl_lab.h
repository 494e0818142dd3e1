#ifndef ICL_LAB_H
#define ICL_LAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IclStatus {
  ICL_STATUS_OK = 0,
  ICL_STATUS_NULL_POINTER = 1,
  ICL_STATUS_DIMENSION_MISMATCH = 2,
  ICL_STATUS_DEGENERATE_INPUT = 3,
  ICL_STATUS_NO_CONVERGENCE = 4,
  ICL_STATUS_OUT_OF_RANGE = 5,
  ICL_STATUS_PRECONDITION_VIOLATED = 6,
  ICL_STATUS_NON_FINITE_LOSS = 7,
  ICL_STATUS_INVALID_CONFIG = 8,
  ICL_STATUS_IO = 9,
  ICL_STATUS_INVALID_ARGUMENT = 10,
  /**
   * The experiment ran but at least one of its checks failed or a run aborted.
   */
  ICL_STATUS_CHECKS_FAILED = 11,
  ICL_STATUS_PANIC = 12,
} IclStatus;

typedef enum IclEstimator {
  ICL_ESTIMATOR_SOFTMAX = 0,
  ICL_ESTIMATOR_LINEAR = 1,
} IclEstimator;

/**
 * Opaque training session.
 */
typedef struct IclTrainer IclTrainer;

/**
 * One training checkpoint. `rho` and `train_loss` are NaN when not recorded.
 */
typedef struct IclCheckpoint {
  uint64_t iteration;
  double norm_m;
  double test_error;
  double rho;
  double train_loss;
} IclCheckpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null if there was none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *icl_last_error_message(void);

/**
 * Softmax attention weights of the `n` rows of `xs` (`n×d`) for query `q`
 * under `m` (`d×d`). Writes `n` values to `weights`.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum IclStatus icl_softmax_weights(const double *m,
                                   uintptr_t d,
                                   const double *xs,
                                   uintptr_t n,
                                   const double *q,
                                   double *weights);

/**
 * Prediction at `q` from the context `(xs, ys)` with the given estimator.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum IclStatus icl_predict(enum IclEstimator estimator,
                           const double *m,
                           uintptr_t d,
                           const double *xs,
                           const double *ys,
                           uintptr_t n,
                           const double *q,
                           double *prediction);

/**
 * Largest singular value of a `rows×cols` matrix.
 *
 * # Safety
 * `m` must hold `rows*cols` values and `norm` must be writable.
 */
enum IclStatus icl_spectral_norm(const double *m, uintptr_t rows, uintptr_t cols, double *norm);

/**
 * Subspace error `ρ(M, B)` for `M` (`d×d`) and an orthonormal basis `B` (`d×k`).
 * Infinite when `BᵀMB` is numerically singular.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum IclStatus icl_subspace_error(const double *m,
                                  uintptr_t d,
                                  const double *b,
                                  uintptr_t k,
                                  double *rho);

/**
 * `Σ_{i=1}^m i^d e^{−αi}`.
 *
 * # Safety
 * `value` must be writable.
 */
enum IclStatus icl_discrete_gamma(double d, double alpha, uint64_t m, double *value);

/**
 * Lower and upper bounds on the normalised measure of the cap
 * `{x ∈ S^{d−1} : x₁ ≥ 1 − eps}`.
 *
 * # Safety
 * `lower` and `upper` must be writable.
 */
enum IclStatus icl_cap_measure_bounds(uintptr_t d, double eps, double *lower, double *upper);

/**
 * Creates a trainer for the first grid point of a JSON experiment config
 * (same schema and presets as the `icl-lab` binary) under `seed`.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `trainer` must be writable.
 */
enum IclStatus icl_trainer_new(const char *config_json, uint64_t seed, struct IclTrainer **trainer);

/**
 * Runs the full pretraining loop. On a non-finite loss the partial trace is
 * kept and `IclStatus::NonFiniteLoss` is returned.
 *
 * # Safety
 * `trainer` must come from [`icl_trainer_new`].
 */
enum IclStatus icl_trainer_run(struct IclTrainer *trainer);

/**
 * Dimension `d` of the trained `d×d` matrix.
 *
 * # Safety
 * `trainer` must come from [`icl_trainer_new`] or be null.
 */
uintptr_t icl_trainer_dim(const struct IclTrainer *trainer);

/**
 * Number of checkpoints recorded by the last run (0 before running).
 *
 * # Safety
 * `trainer` must come from [`icl_trainer_new`] or be null.
 */
uintptr_t icl_trainer_checkpoint_count(const struct IclTrainer *trainer);

/**
 * Copies checkpoint `index` into `checkpoint`.
 *
 * # Safety
 * `trainer` must come from [`icl_trainer_new`]; `checkpoint` must be writable.
 */
enum IclStatus icl_trainer_checkpoint(const struct IclTrainer *trainer,
                                      uintptr_t index,
                                      struct IclCheckpoint *checkpoint);

/**
 * Writes the trained `M` (row-major, `len` must equal `d*d`).
 *
 * # Safety
 * `trainer` must come from [`icl_trainer_new`]; `m` must hold `len` values.
 */
enum IclStatus icl_trainer_matrix(const struct IclTrainer *trainer, double *m, uintptr_t len);

/**
 * Frees a trainer. Null is ignored.
 *
 * # Safety
 * `trainer` must come from [`icl_trainer_new`] and not be used afterwards.
 */
void icl_trainer_free(struct IclTrainer *trainer);

/**
 * Runs a CLI subcommand (`"train"`, `"sweep"`, `"lowrank"`, `"transfer"`,
 * `"theory"` or `"gradcheck"`) and writes its outputs under `out_dir`.
 * `config_json` may be null for the defaults; `jobs = 0` uses every core.
 *
 * # Safety
 * String arguments must be NUL-terminated.
 */
enum IclStatus icl_run_experiment(const char *command,
                                  const char *config_json,
                                  const char *out_dir,
                                  uintptr_t jobs);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ICL_LAB_H */
