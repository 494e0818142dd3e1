//! Ground-truth regression functions, their task distributions, and in-context batches.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::sampling::{sample_covariate, sample_noise, sample_unit_sphere, CovariateDist, RngStream};

/// A distribution over labelling functions.
#[derive(Clone, Debug)]
pub enum TaskClass {
    /// `l·wᵀx + b`, `w ~ U(S^{d−1})`, `l, b ~ Unif[−L, L]`.
    Affine { lipschitz: f64 },
    /// `l₁·max(wᵀx, 0) + l₂·min(wᵀx, 0) + b`, `l₁, l₂, b ~ Unif[−L, L]`.
    ///
    /// Since `l₂` is symmetric this is the same distribution as
    /// `l₁(wᵀx)₊ + l₂(−wᵀx)₊ + b`, and `l₁ = l₂` gives an affine function.
    Relu2 { lipschitz: f64 },
    /// `cos(L·wᵀx)`.
    Cosine { lipschitz: f64 },
    /// `ν·cos(θ(x) − b)` on the circle, `b ~ Unif[−π, π]`.
    Hills { nu: f64 },
    /// `aᵀBᵀx + 2`, `a ~ U(S^{k−1})`.
    LowRankAffine { b: Arc<Matrix> },
    /// `(aᵀBᵀx)²`.
    LowRankQuad { b: Arc<Matrix> },
    /// `cos(4·aᵀBᵀx)`.
    LowRankCos { b: Arc<Matrix> },
    /// `aᵀBᵀx`.
    LowRankLin { b: Arc<Matrix> },
}

impl TaskClass {
    pub fn name(&self) -> &'static str {
        match self {
            TaskClass::Affine { .. } => "affine",
            TaskClass::Relu2 { .. } => "relu",
            TaskClass::Cosine { .. } => "cosine",
            TaskClass::Hills { .. } => "hills",
            TaskClass::LowRankAffine { .. } => "lowrank-affine",
            TaskClass::LowRankQuad { .. } => "lowrank-quad",
            TaskClass::LowRankCos { .. } => "lowrank-cos",
            TaskClass::LowRankLin { .. } => "lowrank-lin",
        }
    }

    /// The class-level Lipschitz parameter (`L` or `ν`); `None` for the low-rank classes.
    pub fn lipschitz_parameter(&self) -> Option<f64> {
        match self {
            TaskClass::Affine { lipschitz } | TaskClass::Relu2 { lipschitz } | TaskClass::Cosine { lipschitz } => {
                Some(*lipschitz)
            }
            TaskClass::Hills { nu } => Some(*nu),
            _ => None,
        }
    }

    pub fn subspace(&self) -> Option<&Matrix> {
        match self {
            TaskClass::LowRankAffine { b }
            | TaskClass::LowRankQuad { b }
            | TaskClass::LowRankCos { b }
            | TaskClass::LowRankLin { b } => Some(b),
            _ => None,
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        match self {
            TaskClass::Affine { lipschitz } | TaskClass::Relu2 { lipschitz } | TaskClass::Cosine { lipschitz } => {
                if !(*lipschitz >= 0.0 && lipschitz.is_finite()) {
                    return Err(Error::OutOfRange(format!("L must be >= 0, got {lipschitz}")));
                }
            }
            TaskClass::Hills { nu } => {
                if !(*nu >= 0.0 && nu.is_finite()) {
                    return Err(Error::OutOfRange(format!("nu must be >= 0, got {nu}")));
                }
                if d != 2 {
                    return Err(Error::degenerate(format!("hills tasks need d = 2, got {d}")));
                }
            }
            TaskClass::LowRankAffine { b }
            | TaskClass::LowRankQuad { b }
            | TaskClass::LowRankCos { b }
            | TaskClass::LowRankLin { b } => {
                check_dim(d, b.rows())?;
                if crate::linalg::orthonormality_defect(b) > crate::linalg::tol::ORTHONORMAL_INPUT {
                    return Err(Error::degenerate("low-rank task basis is not orthonormal"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LowRankKind {
    Affine,
    Quad,
    Cos,
    Lin,
}

/// One sampled labelling function.
#[derive(Clone, Debug)]
pub enum TaskSpec {
    Affine {
        w: Vec<f64>,
        slope: f64,
        offset: f64,
    },
    Relu2 {
        w: Vec<f64>,
        pos_slope: f64,
        neg_slope: f64,
        offset: f64,
    },
    Cosine {
        w: Vec<f64>,
        frequency: f64,
    },
    Hills {
        amplitude: f64,
        phase: f64,
    },
    LowRank {
        kind: LowRankKind,
        b: Arc<Matrix>,
        a: Vec<f64>,
        /// `B a`, cached so evaluation is a single dot product.
        direction: Vec<f64>,
    },
}

impl TaskSpec {
    pub fn dim(&self) -> usize {
        match self {
            TaskSpec::Affine { w, .. } | TaskSpec::Relu2 { w, .. } | TaskSpec::Cosine { w, .. } => w.len(),
            TaskSpec::Hills { .. } => 2,
            TaskSpec::LowRank { direction, .. } => direction.len(),
        }
    }

    pub fn low_rank(kind: LowRankKind, b: Arc<Matrix>, a: Vec<f64>) -> Result<Self> {
        let direction = b.matvec(&a)?;
        Ok(TaskSpec::LowRank { kind, b, a, direction })
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskSpec::Affine { slope, offset, .. } => write!(f, "affine(l={slope}, b={offset})"),
            TaskSpec::Relu2 {
                pos_slope,
                neg_slope,
                offset,
                ..
            } => write!(f, "relu(l1={pos_slope}, l2={neg_slope}, b={offset})"),
            TaskSpec::Cosine { frequency, .. } => write!(f, "cosine(L={frequency})"),
            TaskSpec::Hills { amplitude, phase } => write!(f, "hills(nu={amplitude}, b={phase})"),
            TaskSpec::LowRank { kind, .. } => write!(f, "lowrank({kind:?})"),
        }
    }
}

/// Samples a task from `class` in dimension `d`.
pub fn draw_task(class: &TaskClass, d: usize, rng: &mut RngStream) -> Result<TaskSpec> {
    class.validate(d)?;
    let task = match class {
        TaskClass::Affine { lipschitz: l } => {
            let w = sample_unit_sphere(d, rng)?;
            TaskSpec::Affine {
                w,
                slope: rng.uniform(-l, *l),
                offset: rng.uniform(-l, *l),
            }
        }
        TaskClass::Relu2 { lipschitz: l } => {
            let w = sample_unit_sphere(d, rng)?;
            TaskSpec::Relu2 {
                w,
                pos_slope: rng.uniform(-l, *l),
                neg_slope: rng.uniform(-l, *l),
                offset: rng.uniform(-l, *l),
            }
        }
        TaskClass::Cosine { lipschitz } => TaskSpec::Cosine {
            w: sample_unit_sphere(d, rng)?,
            frequency: *lipschitz,
        },
        TaskClass::Hills { nu } => TaskSpec::Hills {
            amplitude: *nu,
            phase: rng.uniform(-PI, PI),
        },
        TaskClass::LowRankAffine { b }
        | TaskClass::LowRankQuad { b }
        | TaskClass::LowRankCos { b }
        | TaskClass::LowRankLin { b } => {
            let kind = match class {
                TaskClass::LowRankAffine { .. } => LowRankKind::Affine,
                TaskClass::LowRankQuad { .. } => LowRankKind::Quad,
                TaskClass::LowRankCos { .. } => LowRankKind::Cos,
                _ => LowRankKind::Lin,
            };
            let a = sample_unit_sphere(b.cols(), rng)?;
            TaskSpec::low_rank(kind, Arc::clone(b), a)?
        }
    };
    Ok(task)
}

/// `f(x)` for a sampled task.
pub fn evaluate_task(task: &TaskSpec, x: &[f64]) -> Result<f64> {
    if let TaskSpec::Hills { .. } = task {
        if x.len() != 2 {
            return Err(Error::degenerate(format!(
                "hills tasks are defined on the circle, got d = {}",
                x.len()
            )));
        }
    }
    check_dim(task.dim(), x.len())?;
    Ok(evaluate_unchecked(task, x))
}

#[inline]
fn evaluate_unchecked(task: &TaskSpec, x: &[f64]) -> f64 {
    match task {
        TaskSpec::Affine { w, slope, offset } => slope * dot(w, x) + offset,
        TaskSpec::Relu2 {
            w,
            pos_slope,
            neg_slope,
            offset,
        } => {
            let t = dot(w, x);
            pos_slope * t.max(0.0) + neg_slope * t.min(0.0) + offset
        }
        TaskSpec::Cosine { w, frequency } => (frequency * dot(w, x)).cos(),
        TaskSpec::Hills { amplitude, phase } => {
            let theta = x[1].atan2(x[0]);
            amplitude * (theta - phase).cos()
        }
        TaskSpec::LowRank { kind, direction, .. } => {
            let t = dot(direction, x);
            match kind {
                LowRankKind::Affine => t + 2.0,
                LowRankKind::Quad => t * t,
                LowRankKind::Cos => (4.0 * t).cos(),
                LowRankKind::Lin => t,
            }
        }
    }
}

/// Upper bound on the Lipschitz constant of `task` over the unit ball.
///
/// These are the documented bounds (gradient-norm suprema), not infima; use
/// them only as bounds.
pub fn task_lipschitz(task: &TaskSpec) -> f64 {
    match task {
        TaskSpec::Affine { slope, .. } => slope.abs(),
        TaskSpec::Relu2 {
            pos_slope, neg_slope, ..
        } => pos_slope.abs().max(neg_slope.abs()),
        TaskSpec::Cosine { frequency, .. } => frequency.abs(),
        // ν cos(θ − b) = ν (cos b, sin b)·x on the circle: linear with slope ν
        TaskSpec::Hills { amplitude, .. } => amplitude.abs(),
        TaskSpec::LowRank { kind, a, .. } => {
            let na = norm(a);
            match kind {
                LowRankKind::Affine | LowRankKind::Lin => na,
                // ∇(aᵀBᵀx)² = 2(aᵀBᵀx)·Ba, and |aᵀBᵀx| ≤ ‖a‖ on the unit ball
                LowRankKind::Quad => 2.0 * na * na,
                LowRankKind::Cos => 4.0 * na,
            }
        }
    }
}

/// One in-context instance: `n` labelled tokens and `m` queries with clean targets.
#[derive(Clone, Debug)]
pub struct ContextBatch {
    /// `n×d` context covariates.
    pub xs: Matrix,
    /// Noisy labels `f(x_i) + ε_i`.
    pub ys: Vec<f64>,
    /// The recorded noise draws `ε_i`.
    pub noise: Vec<f64>,
    /// `m×d` query covariates.
    pub queries: Matrix,
    /// Clean query labels `f(q_j)`.
    pub targets: Vec<f64>,
    pub task: TaskSpec,
}

impl ContextBatch {
    pub fn n(&self) -> usize {
        self.xs.rows()
    }

    pub fn m(&self) -> usize {
        self.queries.rows()
    }

    pub fn dim(&self) -> usize {
        self.xs.cols()
    }

    /// Clean context labels `f(x_i) = y_i − ε_i`.
    pub fn clean_labels(&self) -> Vec<f64> {
        self.ys.iter().zip(&self.noise).map(|(y, e)| y - e).collect()
    }
}

/// `⌊√n⌋` queries per context, at least one.
pub fn default_query_count(n: usize) -> usize {
    ((n as f64).sqrt().floor() as usize).max(1)
}

/// Draws `n + m` iid covariates, labels the first `n` with noise and keeps
/// the last `m` as queries with clean targets.
pub fn make_context(
    task: &TaskSpec,
    dist: &CovariateDist,
    n: usize,
    m: usize,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<ContextBatch> {
    if n == 0 || m == 0 {
        return Err(Error::degenerate("contexts need n >= 1 and m >= 1"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::OutOfRange(format!("sigma must be >= 0, got {sigma}")));
    }
    let d = dist.dim();
    check_dim(task.dim(), d)?;
    let mut xs = Matrix::zeros(n, d);
    let mut queries = Matrix::zeros(m, d);
    for i in 0..n {
        xs.row_mut(i).copy_from_slice(&sample_covariate(dist, rng)?);
    }
    for j in 0..m {
        queries.row_mut(j).copy_from_slice(&sample_covariate(dist, rng)?);
    }
    let noise: Vec<f64> = (0..n).map(|_| sample_noise(sigma, rng)).collect();
    let mut ys = Vec::with_capacity(n);
    for (i, e) in noise.iter().enumerate() {
        ys.push(evaluate_task(task, xs.row(i))? + e);
    }
    let targets = (0..m)
        .map(|j| evaluate_task(task, queries.row(j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ContextBatch {
        xs,
        ys,
        noise,
        queries,
        targets,
        task: task.clone(),
    })
}

/// Draws a fresh task from `class` and a context for it.
pub fn sample_context(
    class: &TaskClass,
    dist: &CovariateDist,
    n: usize,
    m: usize,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<ContextBatch> {
    let task = draw_task(class, dist.dim(), rng)?;
    make_context(&task, dist, n, m, sigma, rng)
}
