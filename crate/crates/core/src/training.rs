//! Adam, the one-task-per-round pretraining loop, and the metrics tracked
//! during it (`‖M‖₂`, test ICL error, subspace error `ρ(M, B)`).

use rayon::prelude::*;
use thiserror::Error;

use crate::attention::{context_sq_loss, loss_and_grad, AttentionParams, ContextSampler, Estimator};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, Matrix};
use crate::sampling::RngStream;

/// Substream of the run's stream reserved for evaluation contexts, so every
/// checkpoint is scored on the same tasks.
pub const EVAL_STREAM: u64 = 1 << 63;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-step multiplicative learning-rate decay (`1.0` disables it).
    pub decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub params: Matrix,
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: Matrix, config: AdamConfig) -> Self {
        let (r, c) = params.shape();
        AdamState {
            params,
            first_moment: Matrix::zeros(r, c),
            second_moment: Matrix::zeros(r, c),
            step: 0,
            config,
        }
    }

    /// Learning rate for the current step count, `lr · decay^t`.
    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.config.decay.powf(self.step as f64)
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, grad: &Matrix) -> Result<()> {
        check_dim(self.params.rows(), grad.rows())?;
        check_dim(self.params.cols(), grad.cols())?;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        self.step += 1;
        let lr = self.current_lr();
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        let params = self.params.as_mut_slice();
        let m = self.first_moment.as_mut_slice();
        let v = self.second_moment.as_mut_slice();
        for (((p, mi), vi), &g) in params.iter_mut().zip(m).zip(v).zip(grad.as_slice()) {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Distribution of pretraining contexts.
    pub sampler: ContextSampler,
    /// Distribution of evaluation contexts; defaults to `sampler` when `None`.
    pub eval_sampler: Option<ContextSampler>,
    pub estimator: Estimator,
    /// Train `A` with `M = AᵀA` (true) or `M` directly (false).
    pub tied: bool,
    /// Initial `A = init_scale·I` (tied) or `M = init_scale²·I` (direct).
    pub init_scale: f64,
    pub adam: AdamConfig,
    pub iterations: usize,
    pub eval_every: usize,
    pub eval_tasks: usize,
    /// When set, `ρ(M, B)` is recorded at each checkpoint.
    pub subspace: Option<Matrix>,
}

impl TrainConfig {
    /// Defaults for the window-scale experiments: tied weights from `0.001·I`,
    /// Adam with learning rate 0.1 decaying by 0.999 per step, checkpoints every
    /// 100 rounds scored on 500 tasks.
    pub fn new(sampler: ContextSampler) -> Self {
        TrainConfig {
            sampler,
            eval_sampler: None,
            estimator: Estimator::Softmax,
            tied: true,
            init_scale: 1e-3,
            adam: AdamConfig {
                lr: 0.1,
                decay: 0.999,
                ..AdamConfig::default()
            },
            iterations: 3000,
            eval_every: 100,
            eval_tasks: 500,
            subspace: None,
        }
    }

    pub fn initial_params(&self) -> AttentionParams {
        let d = self.sampler.dim();
        if self.tied {
            AttentionParams::tied(Matrix::scaled_identity(d, self.init_scale), self.estimator)
        } else {
            AttentionParams::direct(
                Matrix::scaled_identity(d, self.init_scale * self.init_scale),
                self.estimator,
            )
        }
    }

    fn validate(&self) -> Result<()> {
        if matches!(self.estimator, Estimator::Window { .. }) {
            return Err(Error::validation("estimator", "the window estimator cannot be trained"));
        }
        if self.eval_every == 0 {
            return Err(Error::validation("eval_every", "must be >= 1"));
        }
        if self.eval_tasks == 0 {
            return Err(Error::validation("eval_tasks", "must be >= 1"));
        }
        if let Some(b) = &self.subspace {
            check_dim(self.sampler.dim(), b.rows())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub norm_m: f64,
    pub test_error: f64,
    pub rho: Option<f64>,
    /// Mean training loss over the rounds since the previous checkpoint.
    pub train_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub checkpoints: Vec<Checkpoint>,
    /// Softmax logits clipped at `±LOGIT_CLIP` over the whole run.
    pub clipped_logits: usize,
}

impl TrainTrace {
    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    fn push(&mut self, cp: Checkpoint) {
        debug_assert!(self.checkpoints.last().is_none_or(|p| p.iteration < cp.iteration));
        self.checkpoints.push(cp);
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub trace: TrainTrace,
    pub params: AttentionParams,
}

/// A run that stopped early; carries the trace recorded so far.
#[derive(Debug, Error)]
#[error("pretraining aborted: {source}")]
pub struct PretrainAbort {
    pub trace: TrainTrace,
    #[source]
    pub source: Error,
}

/// Mean context loss over `num_tasks` fresh tasks, task `t` drawn from
/// substream `t` of `rng`.
pub fn evaluate_icl(
    params: &AttentionParams,
    sampler: &ContextSampler,
    num_tasks: usize,
    rng: &RngStream,
) -> Result<f64> {
    if num_tasks == 0 {
        return Err(Error::OutOfRange("evaluate_icl needs at least one task".into()));
    }
    let losses: Vec<f64> = (0..num_tasks as u64)
        .into_par_iter()
        .map(|t| context_sq_loss(params, &sampler.sample_indexed(rng, t)?))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / num_tasks as f64)
}

/// Threshold on `σ_min(BᵀMB)` below which [`subspace_error`] returns `+∞`.
pub const RHO_SINGULAR: f64 = 1e-12;

/// `ρ(M, B) = ‖B⊥ᵀ M B⊥‖₂ / σ_min(BᵀMB)`; `+∞` when the `B` block is singular.
pub fn subspace_error(m: &Matrix, b: &Matrix) -> Result<f64> {
    check_dim(m.rows(), b.rows())?;
    let b_perp = linalg::orthonormal_complement(b)?;
    let inner = b.t_matmul(&m.matmul(b)?)?;
    let sigma_min = *linalg::singular_values(&inner)?
        .last()
        .ok_or_else(|| Error::degenerate("empty subspace"))?;
    if !(sigma_min > RHO_SINGULAR) {
        return Ok(f64::INFINITY);
    }
    let outer = b_perp.t_matmul(&m.matmul(&b_perp)?)?;
    Ok(linalg::spectral_norm_default(&outer) / sigma_min)
}

fn checkpoint(
    config: &TrainConfig,
    params: &AttentionParams,
    iteration: usize,
    eval_rng: &RngStream,
    train_loss: Option<f64>,
) -> Result<Checkpoint> {
    let m = params.matrix();
    let eval_sampler = config.eval_sampler.as_ref().unwrap_or(&config.sampler);
    let test_error = evaluate_icl(params, eval_sampler, config.eval_tasks, eval_rng)?;
    let rho = match &config.subspace {
        Some(b) => Some(subspace_error(&m, b)?),
        None => None,
    };
    Ok(Checkpoint {
        iteration,
        norm_m: linalg::spectral_norm_default(&m),
        test_error,
        rho,
        train_loss,
    })
}

/// Pretrains the key-query matrix with one fresh task per round.
///
/// Round `i` draws its context from substream `i` of `rng`; evaluation uses
/// substream [`EVAL_STREAM`]. Checkpoints are taken at iteration 0, every
/// `eval_every` rounds, and after the final round.
pub fn pretrain(config: &TrainConfig, rng: &RngStream) -> std::result::Result<PretrainOutcome, PretrainAbort> {
    let mut trace = TrainTrace::default();
    macro_rules! bail {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(source) => return Err(PretrainAbort { trace, source }),
            }
        };
    }
    bail!(config.validate());
    let eval_rng = rng.substream(EVAL_STREAM);
    let mut params = config.initial_params();
    let mut adam = AdamState::new(params.raw().clone(), config.adam);
    let cp = bail!(checkpoint(config, &params, 0, &eval_rng, None));
    trace.push(cp);

    let mut window_loss = 0.0;
    let mut window_len = 0usize;
    for iteration in 1..=config.iterations {
        let batch = bail!(config.sampler.sample_indexed(rng, iteration as u64));
        let lg = bail!(loss_and_grad(&params, &batch));
        trace.clipped_logits += lg.clipped;
        if !lg.loss.is_finite() || !lg.grad.is_finite() {
            return Err(PretrainAbort {
                trace,
                source: Error::NonFiniteLoss { iteration },
            });
        }
        bail!(adam.adam_step(&lg.grad));
        if !adam.params.is_finite() {
            return Err(PretrainAbort {
                trace,
                source: Error::NonFiniteLoss { iteration },
            });
        }
        params = params.with_raw(adam.params.clone());
        window_loss += lg.loss;
        window_len += 1;
        if iteration % config.eval_every == 0 || iteration == config.iterations {
            let mean = window_loss / window_len as f64;
            let cp = bail!(checkpoint(config, &params, iteration, &eval_rng, Some(mean)));
            trace.push(cp);
            window_loss = 0.0;
            window_len = 0;
        }
    }
    Ok(PretrainOutcome { trace, params })
}
