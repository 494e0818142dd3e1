//! C ABI over `icl_lab`.
//!
//! Matrices cross the boundary as row-major `double` arrays. Every function
//! returns an [`IclStatus`]; on failure a message is kept per thread and can be
//! read with [`icl_last_error_message`]. Panics are caught and reported as
//! [`IclStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use icl_lab::attention::{self, AttentionParams};
use icl_lab::cli::{self, Command};
use icl_lab::error::Error;
use icl_lab::linalg::{self, Matrix};
use icl_lab::sampling::RngStream;
use icl_lab::theory;
use icl_lab::training::{self, Checkpoint, TrainConfig, TrainTrace};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IclStatus {
    Ok = 0,
    NullPointer = 1,
    DimensionMismatch = 2,
    DegenerateInput = 3,
    NoConvergence = 4,
    OutOfRange = 5,
    PreconditionViolated = 6,
    NonFiniteLoss = 7,
    InvalidConfig = 8,
    Io = 9,
    InvalidArgument = 10,
    /// The experiment ran but at least one of its checks failed or a run aborted.
    ChecksFailed = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IclEstimator {
    Softmax = 0,
    Linear = 1,
}

/// One training checkpoint. `rho` and `train_loss` are NaN when not recorded.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct IclCheckpoint {
    pub iteration: u64,
    pub norm_m: f64,
    pub test_error: f64,
    pub rho: f64,
    pub train_loss: f64,
}

/// Opaque training session.
pub struct IclTrainer {
    config: TrainConfig,
    rng: RngStream,
    trace: Option<TrainTrace>,
    params: Option<AttentionParams>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(IclStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::DimensionMismatch { .. } => IclStatus::DimensionMismatch,
            Error::DegenerateInput(_) => IclStatus::DegenerateInput,
            Error::NoConvergence { .. } => IclStatus::NoConvergence,
            Error::OutOfRange(_) => IclStatus::OutOfRange,
            Error::PreconditionViolated(_) => IclStatus::PreconditionViolated,
            Error::NonFiniteLoss { .. } => IclStatus::NonFiniteLoss,
            Error::Parse { .. } | Error::Validation { .. } => IclStatus::InvalidConfig,
            Error::Io { .. } => IclStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(IclStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IclStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            IclStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Matrix, Failure> {
    let data = slice(p, rows * cols, what)?.to_vec();
    Ok(Matrix::from_vec(rows, cols, data)?)
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure(IclStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

/// Message for the last failure on this thread, or null if there was none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn icl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Softmax attention weights of the `n` rows of `xs` (`n×d`) for query `q`
/// under `m` (`d×d`). Writes `n` values to `weights`.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn icl_softmax_weights(
    m: *const f64,
    d: usize,
    xs: *const f64,
    n: usize,
    q: *const f64,
    weights: *mut f64,
) -> IclStatus {
    guard(|| {
        let m = matrix(m, d, d, "m")?;
        let xs = matrix(xs, n, d, "xs")?;
        let q = slice(q, d, "q")?;
        if weights.is_null() {
            return Err(null("weights"));
        }
        let w = attention::softmax_weights(&m, &xs, q)?;
        std::slice::from_raw_parts_mut(weights, n).copy_from_slice(&w.weights);
        Ok(())
    })
}

/// Prediction at `q` from the context `(xs, ys)` with the given estimator.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn icl_predict(
    estimator: IclEstimator,
    m: *const f64,
    d: usize,
    xs: *const f64,
    ys: *const f64,
    n: usize,
    q: *const f64,
    prediction: *mut f64,
) -> IclStatus {
    guard(|| {
        let m = matrix(m, d, d, "m")?;
        let xs = matrix(xs, n, d, "xs")?;
        let ys = slice(ys, n, "ys")?;
        let q = slice(q, d, "q")?;
        let out = out(prediction, "prediction")?;
        *out = match estimator {
            IclEstimator::Softmax => attention::predict_softmax(&m, &xs, ys, q)?,
            IclEstimator::Linear => attention::predict_linear(&m, &xs, ys, q)?,
        };
        Ok(())
    })
}

/// Largest singular value of a `rows×cols` matrix.
///
/// # Safety
/// `m` must hold `rows*cols` values and `norm` must be writable.
#[no_mangle]
pub unsafe extern "C" fn icl_spectral_norm(m: *const f64, rows: usize, cols: usize, norm: *mut f64) -> IclStatus {
    guard(|| {
        let m = matrix(m, rows, cols, "m")?;
        *out(norm, "norm")? = linalg::spectral_norm_default(&m);
        Ok(())
    })
}

/// Subspace error `ρ(M, B)` for `M` (`d×d`) and an orthonormal basis `B` (`d×k`).
/// Infinite when `BᵀMB` is numerically singular.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn icl_subspace_error(
    m: *const f64,
    d: usize,
    b: *const f64,
    k: usize,
    rho: *mut f64,
) -> IclStatus {
    guard(|| {
        let m = matrix(m, d, d, "m")?;
        let b = matrix(b, d, k, "b")?;
        *out(rho, "rho")? = training::subspace_error(&m, &b)?;
        Ok(())
    })
}

/// `Σ_{i=1}^m i^d e^{−αi}`.
///
/// # Safety
/// `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn icl_discrete_gamma(d: f64, alpha: f64, m: u64, value: *mut f64) -> IclStatus {
    guard(|| {
        *out(value, "value")? = theory::discrete_gamma(d, alpha, m)?;
        Ok(())
    })
}

/// Lower and upper bounds on the normalised measure of the cap
/// `{x ∈ S^{d−1} : x₁ ≥ 1 − eps}`.
///
/// # Safety
/// `lower` and `upper` must be writable.
#[no_mangle]
pub unsafe extern "C" fn icl_cap_measure_bounds(d: usize, eps: f64, lower: *mut f64, upper: *mut f64) -> IclStatus {
    guard(|| {
        let (lo, hi) = theory::cap_measure_bounds(d, eps)?;
        *out(lower, "lower")? = lo;
        *out(upper, "upper")? = hi;
        Ok(())
    })
}

/// Creates a trainer for the first grid point of a JSON experiment config
/// (same schema and presets as the `icl-lab` binary) under `seed`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `trainer` must be writable.
#[no_mangle]
pub unsafe extern "C" fn icl_trainer_new(
    config_json: *const c_char,
    seed: u64,
    trainer: *mut *mut IclTrainer,
) -> IclStatus {
    guard(|| {
        let slot = out(trainer, "trainer")?;
        let cfg = cli::parse_config(&string(config_json, "config_json")?)?;
        let (config, rng) = cli::single_run(&cfg, seed)?;
        *slot = Box::into_raw(Box::new(IclTrainer {
            config,
            rng,
            trace: None,
            params: None,
        }));
        Ok(())
    })
}

/// Runs the full pretraining loop. On a non-finite loss the partial trace is
/// kept and `IclStatus::NonFiniteLoss` is returned.
///
/// # Safety
/// `trainer` must come from [`icl_trainer_new`].
#[no_mangle]
pub unsafe extern "C" fn icl_trainer_run(trainer: *mut IclTrainer) -> IclStatus {
    guard(|| {
        let t = out(trainer, "trainer")?;
        match training::pretrain(&t.config, &t.rng) {
            Ok(outcome) => {
                t.trace = Some(outcome.trace);
                t.params = Some(outcome.params);
                Ok(())
            }
            Err(abort) => {
                t.trace = Some(abort.trace);
                t.params = None;
                Err(abort.source.into())
            }
        }
    })
}

/// Dimension `d` of the trained `d×d` matrix.
///
/// # Safety
/// `trainer` must come from [`icl_trainer_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn icl_trainer_dim(trainer: *const IclTrainer) -> usize {
    trainer.as_ref().map_or(0, |t| t.config.sampler.dim())
}

/// Number of checkpoints recorded by the last run (0 before running).
///
/// # Safety
/// `trainer` must come from [`icl_trainer_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn icl_trainer_checkpoint_count(trainer: *const IclTrainer) -> usize {
    trainer
        .as_ref()
        .and_then(|t| t.trace.as_ref())
        .map_or(0, |tr| tr.checkpoints.len())
}

/// Copies checkpoint `index` into `checkpoint`.
///
/// # Safety
/// `trainer` must come from [`icl_trainer_new`]; `checkpoint` must be writable.
#[no_mangle]
pub unsafe extern "C" fn icl_trainer_checkpoint(
    trainer: *const IclTrainer,
    index: usize,
    checkpoint: *mut IclCheckpoint,
) -> IclStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or_else(|| null("trainer"))?;
        let slot = out(checkpoint, "checkpoint")?;
        let cps: &[Checkpoint] = t.trace.as_ref().map_or(&[], |tr| &tr.checkpoints);
        let cp = cps.get(index).ok_or_else(|| {
            Failure(
                IclStatus::InvalidArgument,
                format!("checkpoint {index} out of {}", cps.len()),
            )
        })?;
        *slot = IclCheckpoint {
            iteration: cp.iteration as u64,
            norm_m: cp.norm_m,
            test_error: cp.test_error,
            rho: cp.rho.unwrap_or(f64::NAN),
            train_loss: cp.train_loss.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Writes the trained `M` (row-major, `len` must equal `d*d`).
///
/// # Safety
/// `trainer` must come from [`icl_trainer_new`]; `m` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn icl_trainer_matrix(trainer: *const IclTrainer, m: *mut f64, len: usize) -> IclStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or_else(|| null("trainer"))?;
        let params = t
            .params
            .as_ref()
            .ok_or_else(|| Failure(IclStatus::InvalidArgument, "trainer has no completed run".into()))?;
        let mat = params.matrix();
        if len != mat.as_slice().len() {
            return Err(Error::DimensionMismatch {
                expected: mat.as_slice().len(),
                found: len,
            }
            .into());
        }
        if m.is_null() {
            return Err(null("m"));
        }
        std::slice::from_raw_parts_mut(m, len).copy_from_slice(mat.as_slice());
        Ok(())
    })
}

/// Frees a trainer. Null is ignored.
///
/// # Safety
/// `trainer` must come from [`icl_trainer_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn icl_trainer_free(trainer: *mut IclTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Runs a CLI subcommand (`"train"`, `"sweep"`, `"lowrank"`, `"transfer"`,
/// `"theory"` or `"gradcheck"`) and writes its outputs under `out_dir`.
/// `config_json` may be null for the defaults; `jobs = 0` uses every core.
///
/// # Safety
/// String arguments must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn icl_run_experiment(
    command: *const c_char,
    config_json: *const c_char,
    out_dir: *const c_char,
    jobs: usize,
) -> IclStatus {
    guard(|| {
        let name = string(command, "command")?;
        let command = Command::from_name(&name)
            .ok_or_else(|| Failure(IclStatus::InvalidArgument, format!("unknown command `{name}`")))?;
        let cfg = if config_json.is_null() {
            cli::parse_config("{}")?
        } else {
            cli::parse_config(&string(config_json, "config_json")?)?
        };
        let dir = string(out_dir, "out_dir")?;
        let report = cli::run_experiment(command, &cfg, Path::new(&dir), (jobs > 0).then_some(jobs))?;
        if report.success() {
            Ok(())
        } else {
            Err(Failure(
                IclStatus::ChecksFailed,
                format!(
                    "{} of {} checks failed, {} runs aborted",
                    report.failed_checks,
                    report.checks,
                    report.errors.len()
                ),
            ))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_codes_are_stable() {
        assert_eq!(IclStatus::Ok as i32, 0);
        assert_eq!(IclStatus::ChecksFailed as i32, 11);
        assert_eq!(IclStatus::Panic as i32, 12);
    }

    #[test]
    fn null_output_sets_message() {
        let m = [1.0];
        let status = unsafe { icl_spectral_norm(m.as_ptr(), 1, 1, ptr::null_mut()) };
        assert_eq!(status, IclStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(icl_last_error_message()) };
        assert!(msg.to_str().unwrap().contains("norm"));
    }
}
