//! One-layer attention estimators over in-context tokens.
//!
//! With value weights fixed, the softmax prediction at a query `q` is
//!
//! ```text
//! h(q) = Σ_i y_i exp(x_iᵀ M q) / Σ_j exp(x_jᵀ M q)
//! ```
//!
//! i.e. a kernel-weighted average of the context labels. For `M = w·I` and
//! unit-norm tokens, `x_iᵀ M q = w (1 − ‖x_i − q‖²/2)`, which makes this a
//! Nadaraya-Watson estimator with a Gaussian kernel of bandwidth `~1/√w`.
//! Linear attention replaces the softmax by the raw scores, and the window
//! estimator replaces the kernel by a hard ball of radius `1/√w`.
//!
//! Queries never attend to each other: every query sees only the `n` labelled
//! context tokens.

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{axpy, distance, dot, Matrix};
use crate::sampling::{CovariateDist, RngStream};
use crate::tasks::{sample_context, ContextBatch, TaskClass};

/// Logits are clipped to `±LOGIT_CLIP` before exponentiation.
pub const LOGIT_CLIP: f64 = 700.0;

/// How the prediction is formed from the scores `x_iᵀ M q`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Estimator {
    Softmax,
    Linear,
    /// Hard window: uniform average over tokens with `‖x_i − q‖ < 1/√w_kq`.
    Window {
        w_kq: f64,
    },
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Softmax => "softmax",
            Estimator::Linear => "linear",
            Estimator::Window { .. } => "window",
        }
    }
}

/// How the key-query matrix is parameterised.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamMode {
    /// `M` is trained directly.
    DirectM(Matrix),
    /// `M := AᵀA` (tied key and query weights), always symmetric PSD.
    TiedFactor(Matrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub mode: ParamMode,
    pub estimator: Estimator,
}

impl AttentionParams {
    pub fn direct(m: Matrix, estimator: Estimator) -> Self {
        AttentionParams {
            mode: ParamMode::DirectM(m),
            estimator,
        }
    }

    pub fn tied(a: Matrix, estimator: Estimator) -> Self {
        AttentionParams {
            mode: ParamMode::TiedFactor(a),
            estimator,
        }
    }

    /// The effective key-query matrix `M`.
    pub fn matrix(&self) -> Matrix {
        match &self.mode {
            ParamMode::DirectM(m) => m.clone(),
            ParamMode::TiedFactor(a) => a.t_matmul(a).expect("square factor"),
        }
    }

    /// The trainable parameter (either `M` or `A`).
    pub fn raw(&self) -> &Matrix {
        match &self.mode {
            ParamMode::DirectM(m) | ParamMode::TiedFactor(m) => m,
        }
    }

    pub fn with_raw(&self, raw: Matrix) -> Self {
        let mode = match self.mode {
            ParamMode::DirectM(_) => ParamMode::DirectM(raw),
            ParamMode::TiedFactor(_) => ParamMode::TiedFactor(raw),
        };
        AttentionParams {
            mode,
            estimator: self.estimator,
        }
    }

    pub fn is_tied(&self) -> bool {
        matches!(self.mode, ParamMode::TiedFactor(_))
    }
}

/// Softmax weights plus the number of logits that hit the clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxWeights {
    pub weights: Vec<f64>,
    pub clipped: usize,
}

/// Numerically stable softmax (max-logit subtraction, clipping at `±LOGIT_CLIP`).
pub fn softmax_from_logits(logits: &[f64]) -> SoftmaxWeights {
    let mut clipped = 0;
    let mut weights: Vec<f64> = logits
        .iter()
        .map(|&l| {
            if l.abs() > LOGIT_CLIP {
                clipped += 1;
                l.clamp(-LOGIT_CLIP, LOGIT_CLIP)
            } else {
                l
            }
        })
        .collect();
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        total += *w;
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
    SoftmaxWeights { weights, clipped }
}

/// Scores `x_iᵀ M q` for every context row.
pub fn attention_logits(m: &Matrix, xs: &Matrix, q: &[f64]) -> Result<Vec<f64>> {
    check_dim(m.cols(), q.len())?;
    check_dim(m.rows(), xs.cols())?;
    let mq = m.matvec(q)?;
    Ok((0..xs.rows()).map(|i| dot(xs.row(i), &mq)).collect())
}

pub fn softmax_weights(m: &Matrix, xs: &Matrix, q: &[f64]) -> Result<SoftmaxWeights> {
    Ok(softmax_from_logits(&attention_logits(m, xs, q)?))
}

pub fn predict_softmax(m: &Matrix, xs: &Matrix, ys: &[f64], q: &[f64]) -> Result<f64> {
    check_dim(xs.rows(), ys.len())?;
    let s = softmax_weights(m, xs, q)?;
    Ok(dot(&s.weights, ys))
}

/// `Σ_i y_i x_iᵀ M q`.
pub fn predict_linear(m: &Matrix, xs: &Matrix, ys: &[f64], q: &[f64]) -> Result<f64> {
    check_dim(xs.rows(), ys.len())?;
    Ok(dot(&attention_logits(m, xs, q)?, ys))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowPrediction {
    pub value: f64,
    /// Tokens inside the window.
    pub count: usize,
    /// Set when the window was empty and the nearest token's label was used.
    pub fallback: bool,
}

/// Uniform average of labels within `‖x_i − q‖ < 1/√w_kq`; nearest token when empty.
pub fn predict_window(w_kq: f64, xs: &Matrix, ys: &[f64], q: &[f64]) -> Result<WindowPrediction> {
    check_dim(xs.rows(), ys.len())?;
    check_dim(xs.cols(), q.len())?;
    if !(w_kq > 0.0) {
        return Err(Error::OutOfRange(format!(
            "window estimator needs w_kq > 0, got {w_kq}"
        )));
    }
    if xs.rows() == 0 {
        return Err(Error::degenerate("window estimator needs at least one token"));
    }
    let radius = 1.0 / w_kq.sqrt();
    let mut sum = 0.0;
    let mut count = 0;
    let mut nearest = (f64::INFINITY, 0);
    for (i, &y) in ys.iter().enumerate() {
        let dist = distance(xs.row(i), q);
        if dist < radius {
            sum += y;
            count += 1;
        }
        if dist < nearest.0 {
            nearest = (dist, i);
        }
    }
    Ok(if count > 0 {
        WindowPrediction {
            value: sum / count as f64,
            count,
            fallback: false,
        }
    } else {
        WindowPrediction {
            value: ys[nearest.1],
            count: 0,
            fallback: true,
        }
    })
}

/// Prediction at `q` under any estimator.
pub fn predict(params: &AttentionParams, xs: &Matrix, ys: &[f64], q: &[f64]) -> Result<f64> {
    match params.estimator {
        Estimator::Softmax => predict_softmax(&params.matrix(), xs, ys, q),
        Estimator::Linear => predict_linear(&params.matrix(), xs, ys, q),
        Estimator::Window { w_kq } => Ok(predict_window(w_kq, xs, ys, q)?.value),
    }
}

fn check_batch(m: &Matrix, batch: &ContextBatch) -> Result<()> {
    check_dim(batch.dim(), m.rows())?;
    check_dim(batch.dim(), m.cols())?;
    check_dim(batch.n(), batch.ys.len())?;
    check_dim(batch.m(), batch.targets.len())
}

/// Mean over the queries of `(prediction − clean target)²`.
pub fn context_sq_loss(params: &AttentionParams, batch: &ContextBatch) -> Result<f64> {
    if let Estimator::Window { w_kq } = params.estimator {
        let mut acc = 0.0;
        for j in 0..batch.m() {
            let p = predict_window(w_kq, &batch.xs, &batch.ys, batch.queries.row(j))?.value;
            acc += (p - batch.targets[j]).powi(2);
        }
        return Ok(acc / batch.m() as f64);
    }
    Ok(loss_and_grad_m(&params.matrix(), params.estimator, batch, false)?.loss)
}

/// Loss, gradient with respect to the trainable parameter, and clip count.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Matrix,
    pub clipped: usize,
}

fn loss_and_grad_m(m: &Matrix, estimator: Estimator, batch: &ContextBatch, want_grad: bool) -> Result<LossGrad> {
    check_batch(m, batch)?;
    let d = batch.dim();
    let nq = batch.m() as f64;
    let mut grad = Matrix::zeros(d, d);
    let mut loss = 0.0;
    let mut clipped = 0;
    let mut direction = vec![0.0; d];
    for j in 0..batch.m() {
        let q = batch.queries.row(j);
        let logits = attention_logits(m, &batch.xs, q)?;
        direction.iter_mut().for_each(|v| *v = 0.0);
        let residual = match estimator {
            Estimator::Softmax => {
                let s = softmax_from_logits(&logits);
                clipped += s.clipped;
                let p = dot(&s.weights, &batch.ys);
                if want_grad {
                    // ∂p/∂M = Σ_i s_i (y_i − p) x_i qᵀ
                    for (i, (&si, &yi)) in s.weights.iter().zip(&batch.ys).enumerate() {
                        axpy(si * (yi - p), batch.xs.row(i), &mut direction);
                    }
                }
                p - batch.targets[j]
            }
            Estimator::Linear => {
                let p = dot(&logits, &batch.ys);
                if want_grad {
                    // ∂p/∂M = Σ_i y_i x_i qᵀ
                    for (i, &yi) in batch.ys.iter().enumerate() {
                        axpy(yi, batch.xs.row(i), &mut direction);
                    }
                }
                p - batch.targets[j]
            }
            Estimator::Window { .. } => {
                return Err(Error::PreconditionViolated(
                    "the hard-window estimator has no gradient".into(),
                ))
            }
        };
        loss += residual * residual;
        if want_grad {
            let coeff = 2.0 * residual / nq;
            for (a, &da) in direction.iter().enumerate() {
                if da == 0.0 {
                    continue;
                }
                axpy(coeff * da, q, grad.row_mut(a));
            }
        }
    }
    Ok(LossGrad {
        loss: loss / nq,
        grad,
        clipped,
    })
}

/// Gradient of the softmax context loss with respect to `M`, averaged over queries.
pub fn grad_context_softmax(m: &Matrix, batch: &ContextBatch) -> Result<Matrix> {
    Ok(loss_and_grad_m(m, Estimator::Softmax, batch, true)?.grad)
}

/// Gradient of the linear-attention context loss with respect to `M`.
pub fn grad_context_linear(m: &Matrix, batch: &ContextBatch) -> Result<Matrix> {
    Ok(loss_and_grad_m(m, Estimator::Linear, batch, true)?.grad)
}

/// Gradient of the softmax context loss with respect to `A` where `M = AᵀA`:
/// `A (G + Gᵀ)` with `G` the gradient in `M`.
pub fn grad_context_tied(a: &Matrix, batch: &ContextBatch) -> Result<Matrix> {
    let g = grad_context_softmax(&a.t_matmul(a)?, batch)?;
    a.matmul(&g.add(&g.transpose())?)
}

/// Context loss and its gradient with respect to the trainable parameter.
pub fn loss_and_grad(params: &AttentionParams, batch: &ContextBatch) -> Result<LossGrad> {
    match &params.mode {
        ParamMode::DirectM(m) => loss_and_grad_m(m, params.estimator, batch, true),
        ParamMode::TiedFactor(a) => {
            let mut out = loss_and_grad_m(&a.t_matmul(a)?, params.estimator, batch, true)?;
            out.grad = a.matmul(&out.grad.add(&out.grad.transpose())?)?;
            Ok(out)
        }
    }
}

/// Entrywise central-difference gradient of `loss_fn` at `p`.
pub fn finite_diff_grad(loss_fn: impl Fn(&Matrix) -> f64, p: &Matrix, step: f64) -> Matrix {
    let mut grad = Matrix::zeros(p.rows(), p.cols());
    let mut probe = p.clone();
    for i in 0..p.rows() {
        for j in 0..p.cols() {
            let orig = p[(i, j)];
            probe[(i, j)] = orig + step;
            let up = loss_fn(&probe);
            probe[(i, j)] = orig - step;
            let down = loss_fn(&probe);
            probe[(i, j)] = orig;
            grad[(i, j)] = (up - down) / (2.0 * step);
        }
    }
    grad
}

/// Denominator floor for [`gradient_relative_error`].
pub const GRAD_REL_FLOOR: f64 = 1e-8;

/// `‖a − b‖_F / max(‖a‖_F, ‖b‖_F, GRAD_REL_FLOOR)`.
pub fn gradient_relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a.sub(b).map(|m| m.frobenius_norm()).unwrap_or(f64::INFINITY);
    diff / a.frobenius_norm().max(b.frobenius_norm()).max(GRAD_REL_FLOOR)
}

/// Per-query label-noise factor `Σ_i s_i²`.
pub fn noise_factor(m: &Matrix, xs: &Matrix, q: &[f64]) -> Result<f64> {
    let s = softmax_weights(m, xs, q)?;
    Ok(s.weights.iter().map(|w| w * w).sum())
}

/// Everything needed to draw fresh iid in-context instances.
#[derive(Clone, Debug)]
pub struct ContextSampler {
    pub class: TaskClass,
    pub dist: CovariateDist,
    pub n: usize,
    pub m: usize,
    pub sigma: f64,
}

impl ContextSampler {
    pub fn sample(&self, rng: &mut RngStream) -> Result<ContextBatch> {
        sample_context(&self.class, &self.dist, self.n, self.m, self.sigma, rng)
    }

    /// Context number `index`, drawn from its own substream of `rng`.
    pub fn sample_indexed(&self, rng: &RngStream, index: u64) -> Result<ContextBatch> {
        self.sample(&mut rng.substream(index))
    }

    pub fn dim(&self) -> usize {
        self.dist.dim()
    }
}

/// Monte Carlo estimate of the population loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub num_contexts: usize,
    /// Clean-label estimator error (softmax only).
    pub bias_part: Option<f64>,
    /// `σ² Σ s_i²` label-noise term (softmax only).
    pub noise_part: Option<f64>,
    pub bias_stderr: Option<f64>,
    pub noise_stderr: Option<f64>,
}

/// Mean and standard error of the mean, accumulated in slice order.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-context clean-label error and noise term for softmax attention.
#[derive(Clone, Copy, Debug)]
pub struct ContextParts {
    pub bias: f64,
    pub noise: f64,
}

/// Bias/noise split of one context's expected loss under softmax attention.
pub fn context_parts(m: &Matrix, batch: &ContextBatch, sigma: f64) -> Result<ContextParts> {
    check_batch(m, batch)?;
    let clean = batch.clean_labels();
    let mut bias = 0.0;
    let mut noise = 0.0;
    for j in 0..batch.m() {
        let s = softmax_weights(m, &batch.xs, batch.queries.row(j))?;
        bias += (dot(&s.weights, &clean) - batch.targets[j]).powi(2);
        noise += sigma * sigma * s.weights.iter().map(|w| w * w).sum::<f64>();
    }
    let nq = batch.m() as f64;
    Ok(ContextParts {
        bias: bias / nq,
        noise: noise / nq,
    })
}

/// Monte Carlo loss over `num_contexts` fresh contexts (context `c` uses
/// substream `c` of `rng`). Softmax estimates also carry the bias/noise split
/// computed on the same contexts.
pub fn mc_loss(
    params: &AttentionParams,
    sampler: &ContextSampler,
    num_contexts: usize,
    rng: &RngStream,
) -> Result<LossEstimate> {
    if num_contexts < 2 {
        return Err(Error::OutOfRange("mc_loss needs at least two contexts".into()));
    }
    let m = params.matrix();
    let softmax = params.estimator == Estimator::Softmax;
    let per_context: Vec<(f64, Option<ContextParts>)> = (0..num_contexts as u64)
        .into_par_iter()
        .map(|c| {
            let batch = sampler.sample_indexed(rng, c)?;
            let loss = context_sq_loss(params, &batch)?;
            let parts = if softmax {
                Some(context_parts(&m, &batch, sampler.sigma)?)
            } else {
                None
            };
            Ok((loss, parts))
        })
        .collect::<Result<_>>()?;
    let losses: Vec<f64> = per_context.iter().map(|(l, _)| *l).collect();
    let (mean, stderr) = mean_stderr(&losses);
    let mut estimate = LossEstimate {
        mean,
        stderr,
        num_contexts,
        bias_part: None,
        noise_part: None,
        bias_stderr: None,
        noise_stderr: None,
    };
    if softmax {
        let bias: Vec<f64> = per_context.iter().map(|(_, p)| p.unwrap().bias).collect();
        let noise: Vec<f64> = per_context.iter().map(|(_, p)| p.unwrap().noise).collect();
        let (b, bse) = mean_stderr(&bias);
        let (nz, nse) = mean_stderr(&noise);
        estimate.bias_part = Some(b);
        estimate.noise_part = Some(nz);
        estimate.bias_stderr = Some(bse);
        estimate.noise_stderr = Some(nse);
    }
    Ok(estimate)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossDecomposition {
    pub bias: f64,
    pub bias_stderr: f64,
    pub noise: f64,
    pub noise_stderr: f64,
    pub num_contexts: usize,
}

/// Monte Carlo bias (`(Σ s_i f(x_i) − f(q))²`) and noise (`σ² Σ s_i²`) parts
/// of the softmax loss at `M`.
pub fn mc_loss_decomposed(
    m: &Matrix,
    sampler: &ContextSampler,
    num_contexts: usize,
    rng: &RngStream,
) -> Result<LossDecomposition> {
    if num_contexts < 2 {
        return Err(Error::OutOfRange(
            "mc_loss_decomposed needs at least two contexts".into(),
        ));
    }
    let parts: Vec<ContextParts> = (0..num_contexts as u64)
        .into_par_iter()
        .map(|c| context_parts(m, &sampler.sample_indexed(rng, c)?, sampler.sigma))
        .collect::<Result<_>>()?;
    let bias: Vec<f64> = parts.iter().map(|p| p.bias).collect();
    let noise: Vec<f64> = parts.iter().map(|p| p.noise).collect();
    let (b, bse) = mean_stderr(&bias);
    let (nz, nse) = mean_stderr(&noise);
    Ok(LossDecomposition {
        bias: b,
        bias_stderr: bse,
        noise: nz,
        noise_stderr: nse,
        num_contexts,
    })
}
