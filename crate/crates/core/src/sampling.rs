//! Seeded random generation of covariates and label noise.
//!
//! Every random draw in the crate goes through an [`RngStream`]: a ChaCha8
//! generator keyed by `(seed, stream id)`. ChaCha's native 64-bit stream
//! parameter makes distinct ids independent, and child streams are derived
//! deterministically so that parallel consumers never share state.
//!
//! Gaussians come from `rand_distr::StandardNormal` (the ziggurat method),
//! so outputs are bit-reproducible for a given build and dependency lock.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, norm, Matrix};

/// Reproducible random stream keyed by `(seed, stream id)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Child stream `id` of this stream. Depends only on `(seed, stream, id)`,
    /// never on how many draws the parent has made.
    pub fn substream(&self, id: u64) -> RngStream {
        let key = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(0x51_7cc1_b727_220a)));
        RngStream::new(key, id)
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform draw from `[lo, hi]` (degenerate intervals return `lo`).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        // 53 random bits in [0, 1)
        let u = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * u
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// `d` iid standard normal entries.
pub fn sample_gaussian(d: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..d).map(|_| rng.gaussian()).collect()
}

/// Uniform draw from the unit sphere `S^{d−1}` by normalising a Gaussian.
pub fn sample_unit_sphere(d: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    normalized_draw(rng, |rng| sample_gaussian(d, rng))
}

fn normalized_draw(rng: &mut RngStream, mut draw: impl FnMut(&mut RngStream) -> Vec<f64>) -> Result<Vec<f64>> {
    for _ in 0..2 {
        let mut v = draw(rng);
        let r = norm(&v);
        if r > 0.0 && r.is_finite() {
            v.iter_mut().for_each(|x| *x /= r);
            return Ok(v);
        }
    }
    Err(Error::degenerate("drew a zero vector twice before normalisation"))
}

/// Covariate distributions on (or, for the latent model, near) the unit sphere.
#[derive(Clone, Debug)]
pub enum CovariateDist {
    /// Uniform on `S^{d−1}`.
    UniformSphere { d: usize },
    /// `x = S^{1/2} x̂ / ‖S^{1/2} x̂‖` with `S = diag(scale)` and `x̂ ~ N(0, I)`.
    AnisotropicSphere { scale: Vec<f64> },
    /// `x = J x̂ / ‖J x̂‖` with `x̂ ~ N(0, I)`.
    ShapedSphere { j: Matrix },
    /// `x = c_u B u + c_v B⊥ v` with `u ~ U(S^{k−1})`, `v ~ U(S^{d−k−1})`.
    LowRankLatent {
        b: Matrix,
        b_perp: Matrix,
        c_u: f64,
        c_v: f64,
    },
}

impl CovariateDist {
    pub fn uniform(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::degenerate("dimension must be positive"));
        }
        Ok(CovariateDist::UniformSphere { d })
    }

    pub fn anisotropic(scale: Vec<f64>) -> Result<Self> {
        if scale.is_empty() || scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::degenerate("anisotropic scales must be positive and finite"));
        }
        Ok(CovariateDist::AnisotropicSphere { scale })
    }

    /// The `S_d = diag(1, …, d)` distribution used for the non-isotropic experiments.
    pub fn default_anisotropic(d: usize) -> Result<Self> {
        Self::anisotropic((1..=d).map(|i| i as f64).collect())
    }

    pub fn shaped(j: Matrix) -> Result<Self> {
        if !j.is_square() || j.rows() == 0 || !j.is_finite() {
            return Err(Error::degenerate("shaping matrix must be square and finite"));
        }
        let sv = linalg::singular_values(&j)?;
        let (max, min) = (sv[0], sv[sv.len() - 1]);
        if !(min > 1e-12 * max) {
            return Err(Error::degenerate("shaping matrix is numerically rank deficient"));
        }
        Ok(CovariateDist::ShapedSphere { j })
    }

    /// Shaped distribution with `J = (J̃ᵀJ̃)^{1/2}`, `J̃` a standard Gaussian `d×d` matrix.
    pub fn random_shaped(d: usize, rng: &mut RngStream) -> Result<Self> {
        let jt = Matrix::from_fn(d, d, |_, _| rng.gaussian());
        let j = linalg::psd_sqrt(&jt.t_matmul(&jt)?)?;
        Self::shaped(j)
    }

    pub fn low_rank(b: Matrix, c_u: f64, c_v: f64) -> Result<Self> {
        if c_u == 0.0 || !c_u.is_finite() || !c_v.is_finite() {
            return Err(Error::degenerate("c_u must be nonzero and both scales finite"));
        }
        if b.cols() == 0 || b.cols() >= b.rows() {
            return Err(Error::degenerate("low-rank latent model needs 1 <= k < d"));
        }
        let b_perp = linalg::orthonormal_complement(&b)?;
        Ok(CovariateDist::LowRankLatent { b, b_perp, c_u, c_v })
    }

    pub fn dim(&self) -> usize {
        match self {
            CovariateDist::UniformSphere { d } => *d,
            CovariateDist::AnisotropicSphere { scale } => scale.len(),
            CovariateDist::ShapedSphere { j } => j.rows(),
            CovariateDist::LowRankLatent { b, .. } => b.rows(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CovariateDist::UniformSphere { .. } => "uniform",
            CovariateDist::AnisotropicSphere { .. } => "anisotropic",
            CovariateDist::ShapedSphere { .. } => "shaped",
            CovariateDist::LowRankLatent { .. } => "lowrank-latent",
        }
    }
}

/// One covariate draw from `dist`.
pub fn sample_covariate(dist: &CovariateDist, rng: &mut RngStream) -> Result<Vec<f64>> {
    match dist {
        CovariateDist::UniformSphere { d } => sample_unit_sphere(*d, rng),
        CovariateDist::AnisotropicSphere { scale } => {
            normalized_draw(rng, |rng| scale.iter().map(|s| s.sqrt() * rng.gaussian()).collect())
        }
        CovariateDist::ShapedSphere { j } => normalized_draw(rng, |rng| {
            let g = sample_gaussian(j.cols(), rng);
            j.matvec(&g).expect("square shaping matrix")
        }),
        CovariateDist::LowRankLatent { b, b_perp, c_u, c_v } => {
            let u = sample_unit_sphere(b.cols(), rng)?;
            let v = sample_unit_sphere(b_perp.cols(), rng)?;
            let bu = b.matvec(&u)?;
            let bv = b_perp.matvec(&v)?;
            Ok(bu.iter().zip(&bv).map(|(p, q)| c_u * p + c_v * q).collect())
        }
    }
}

/// A single `N(0, σ²)` draw; `σ = 0` returns exactly zero without consuming randomness.
pub fn sample_noise(sigma: f64, rng: &mut RngStream) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        sigma * rng.gaussian()
    }
}

/// Random `d×k` column-orthonormal `B` (Gram-Schmidt of a Gaussian matrix) and its complement.
pub fn make_random_subspace(d: usize, k: usize, rng: &mut RngStream) -> Result<(Matrix, Matrix)> {
    if k == 0 || k >= d {
        return Err(Error::degenerate(format!(
            "subspace needs 1 <= k < d, got k={k}, d={d}"
        )));
    }
    let raw = Matrix::from_fn(d, k, |_, _| rng.gaussian());
    let b = linalg::gram_schmidt_orthonormalize(&raw, 1e-10)?;
    let b_perp = linalg::orthonormal_complement(&b)?;
    Ok((b, b_perp))
}
