//! Numerical checks of the analytic objects behind the window-scaling story:
//! distance sums `g_p(r)`, spherical caps, the discrete incomplete gamma sum,
//! a rearrangement inequality, and bandwidth sweeps with exponent fits.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::attention::{mean_stderr, softmax_from_logits, ContextSampler};
use crate::error::{Error, Result};
use crate::linalg::{distance, dot, norm, Matrix};
use crate::sampling::{sample_unit_sphere, RngStream};

/// Unit-norm tolerance for inputs to [`g_p`].
const UNIT_TOL: f64 = 1e-8;

/// Default constant-factor band for `Θ(·)` checks.
pub const THETA_BAND: f64 = 64.0;

/// One measured quantity against a bracket.
///
/// `pass` holds iff `lower − slack ≤ measured ≤ upper + slack`; `slack` is
/// zero for exact quantities and a Monte Carlo allowance otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundCheck {
    pub quantity: String,
    pub measured: f64,
    pub lower: f64,
    pub upper: f64,
    pub slack: f64,
    pub pass: bool,
}

impl BoundCheck {
    pub fn new(quantity: impl Into<String>, measured: f64, lower: f64, upper: f64, slack: f64) -> Self {
        let pass = measured >= lower - slack && measured <= upper + slack;
        BoundCheck {
            quantity: quantity.into(),
            measured,
            lower,
            upper,
            slack,
            pass,
        }
    }
}

/// `g_p(r) = Σ_i ‖x_i − x‖^p e^{−r‖x_i − x‖²}` over the rows of `xs`.
pub fn g_p(xs: &Matrix, x: &[f64], p: f64, r: f64) -> Result<f64> {
    if xs.cols() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.cols(),
            found: x.len(),
        });
    }
    if !(p >= 0.0 && r >= 0.0) {
        return Err(Error::OutOfRange(format!("g_p needs p, r >= 0, got p={p}, r={r}")));
    }
    if (norm(x) - 1.0).abs() > UNIT_TOL || (0..xs.rows()).any(|i| (norm(xs.row(i)) - 1.0).abs() > UNIT_TOL) {
        return Err(Error::PreconditionViolated("g_p inputs must be unit vectors".into()));
    }
    Ok((0..xs.rows())
        .map(|i| {
            let dist = distance(xs.row(i), x);
            // 0^0 = 1 so p = 0 counts every token
            let power = if p == 0.0 { 1.0 } else { dist.powf(p) };
            power * (-r * dist * dist).exp()
        })
        .sum())
}

/// Radius where the concentration of `g_0(r)/n` switches from `e^{−2r}` to `r^{−d/2}`.
pub fn g_regime_threshold(d: usize) -> f64 {
    let d = d as f64;
    (d + d.sqrt()) / 2.0
}

/// Reference scale for `g_0(r)/n` on the sphere.
pub fn g_reference(d: usize, r: f64) -> f64 {
    if r >= g_regime_threshold(d) {
        r.powf(-(d as f64) / 2.0)
    } else {
        (-2.0 * r).exp()
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

/// Median of `g_0(r)/n` over `trials` draws of `n` uniform tokens and a uniform
/// query, checked against `[ref/band, band·ref]`.
pub fn check_g_concentration(
    d: usize,
    n: usize,
    r: f64,
    trials: usize,
    band: f64,
    rng: &RngStream,
) -> Result<BoundCheck> {
    if n < 32 || d < 2 {
        return Err(Error::OutOfRange(format!("need n >= 32 and d >= 2, got n={n}, d={d}")));
    }
    if trials == 0 || !(band >= 1.0) {
        return Err(Error::OutOfRange("need trials >= 1 and band >= 1".into()));
    }
    let mut ratios: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng.substream(t);
            let mut xs = Matrix::zeros(n, d);
            for i in 0..n {
                xs.row_mut(i).copy_from_slice(&sample_unit_sphere(d, &mut rng)?);
            }
            let x = sample_unit_sphere(d, &mut rng)?;
            Ok(g_p(&xs, &x, 0.0, r)? / n as f64)
        })
        .collect::<Result<_>>()?;
    let reference = g_reference(d, r);
    Ok(BoundCheck::new(
        format!("g0_concentration(d={d},n={n},r={r})"),
        median(&mut ratios),
        reference / band,
        reference * band,
        0.0,
    ))
}

const CAP_CHUNK: usize = 8192;

/// Fraction of `samples` uniform points on `S^{d−1}` with `x₁ > 1 − ε`.
pub fn cap_measure_mc(d: usize, eps: f64, samples: usize, rng: &RngStream) -> Result<f64> {
    if samples < 1000 {
        return Err(Error::OutOfRange(format!(
            "cap_measure_mc needs >= 1000 samples, got {samples}"
        )));
    }
    if !(eps > 0.0 && eps <= 2.0) {
        return Err(Error::OutOfRange(format!("eps must lie in (0, 2], got {eps}")));
    }
    let chunks = samples.div_ceil(CAP_CHUNK);
    let hits: Vec<usize> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng.substream(c as u64);
            let count = CAP_CHUNK.min(samples - c * CAP_CHUNK);
            let mut hits = 0;
            for _ in 0..count {
                if sample_unit_sphere(d, &mut rng)?[0] > 1.0 - eps {
                    hits += 1;
                }
            }
            Ok(hits)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples as f64)
}

/// Bracket `[(2ε−ε²)^{(d−1)/2}/√(2dπ), (2ε−ε²)^{(d−1)/2}]` on the normalised cap measure.
pub fn cap_measure_bounds(d: usize, eps: f64) -> Result<(f64, f64)> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::OutOfRange(format!("eps must lie in (0, 1], got {eps}")));
    }
    if d < 2 {
        return Err(Error::OutOfRange(format!("need d >= 2, got {d}")));
    }
    let upper = (2.0 * eps - eps * eps).powf((d as f64 - 1.0) / 2.0);
    Ok((upper / (2.0 * d as f64 * PI).sqrt(), upper))
}

/// Monte Carlo cap measure against its bracket with a `4σ` binomial allowance.
pub fn check_cap_measure(d: usize, eps: f64, samples: usize, rng: &RngStream) -> Result<BoundCheck> {
    let (lower, upper) = cap_measure_bounds(d, eps)?;
    let p = cap_measure_mc(d, eps, samples, rng)?;
    let n = samples as f64;
    let p_se = p.max(1.0 / n);
    let slack = 4.0 * (p_se * (1.0 - p_se).max(0.0) / n).sqrt();
    Ok(BoundCheck::new(
        format!("cap_measure(d={d},eps={eps})"),
        p,
        lower,
        upper,
        slack,
    ))
}

/// Exact cap measure on `S²` (`ε/2`) and `S¹` (`arccos(1−ε)/π`), for checking.
pub fn cap_measure_exact(d: usize, eps: f64) -> Option<f64> {
    match d {
        2 => Some((1.0 - eps).clamp(-1.0, 1.0).acos() / PI),
        3 => Some((eps / 2.0).min(1.0)),
        _ => None,
    }
}

/// `γ(d, α, m) = Σ_{i=1}^m i^d e^{−αi}`, summed in log space around the
/// largest term so large `d` does not overflow.
pub fn discrete_gamma(d: f64, alpha: f64, m: u64) -> Result<f64> {
    if m == 0 {
        return Err(Error::OutOfRange("discrete_gamma needs m >= 1".into()));
    }
    let log_term = |i: u64| d * (i as f64).ln() - alpha * i as f64;
    let peak = (1..=m).map(log_term).fold(f64::NEG_INFINITY, f64::max);
    let scaled: f64 = (1..=m).map(|i| (log_term(i) - peak).exp()).sum();
    Ok(peak.exp() * scaled)
}

const STIRLING_MIN: f64 = 10.0;

/// `ln Γ(x)` for `x > 0`: Stirling's series with four correction terms, shifted
/// up by the recurrence `Γ(x+1) = xΓ(x)` when `x < 10`.
pub fn ln_gamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut shift = 0.0;
    let mut z = x;
    while z < STIRLING_MIN {
        shift += z.ln();
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let series = inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 / 1680.0)));
    (z - 0.5) * z.ln() - z + 0.5 * (2.0 * PI).ln() + series - shift
}

/// Boundary between the two regimes of [`discrete_gamma_bounds`].
pub fn gamma_regime_threshold(d: f64) -> f64 {
    d + d.sqrt()
}

/// `γ(d, α, m)` against its two-regime bracket; only defined for `d > 5`, `1 ≤ α ≤ 2`.
pub fn discrete_gamma_bounds(d: f64, alpha: f64, m: u64) -> Result<BoundCheck> {
    if !(d > 5.0 && (1.0..=2.0).contains(&alpha)) {
        return Err(Error::OutOfRange(format!(
            "gamma bracket holds for d > 5 and 1 <= alpha <= 2, got d={d}, alpha={alpha}"
        )));
    }
    let value = discrete_gamma(d, alpha, m)?;
    let mf = m as f64;
    let (lower, upper) = if mf < gamma_regime_threshold(d) {
        let base = d * mf.ln() - alpha * mf - 0.5;
        (base.exp(), (base + mf.ln()).exp())
    } else {
        let g = (ln_gamma(d + 1.0) - (d + 1.0) * alpha.ln()).exp();
        (g / 2.0, 2.0 * g)
    };
    Ok(BoundCheck::new(
        format!("discrete_gamma(d={d},alpha={alpha},m={m})"),
        value,
        lower,
        upper,
        0.0,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RearrangementCheck {
    /// `Σa²/(Σa)²`
    pub lhs: f64,
    /// `Σa²b²/(Σab)²`
    pub rhs: f64,
    /// `b` is constant, so both sides coincide.
    pub tie: bool,
}

impl RearrangementCheck {
    pub fn strict(&self) -> bool {
        self.lhs < self.rhs
    }

    pub fn to_bound_check(&self) -> BoundCheck {
        let mut check = BoundCheck::new("rearrangement", self.lhs, 0.0, self.rhs, 0.0);
        check.pass = self.tie || self.strict();
        check
    }
}

/// Compares `Σa²/(Σa)²` with `Σa²b²/(Σab)²` for positive, similarly ordered `a`, `b`.
pub fn rearrangement_check(a: &[f64], b: &[f64]) -> Result<RearrangementCheck> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.is_empty() || a.iter().chain(b).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::PreconditionViolated(
            "entries must be positive and finite".into(),
        ));
    }
    for i in 0..a.len() {
        for j in 0..i {
            if (a[i] - a[j]) * (b[i] - b[j]) < 0.0 {
                return Err(Error::PreconditionViolated(format!(
                    "a and b are not sorted the same way at ({j}, {i})"
                )));
            }
        }
    }
    let sum_a: f64 = a.iter().sum();
    let sum_ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let lhs = dot(a, a) / (sum_a * sum_a);
    let rhs = a.iter().zip(b).map(|(x, y)| (x * y).powi(2)).sum::<f64>() / (sum_ab * sum_ab);
    let tie = b.iter().all(|&v| v == b[0]);
    Ok(RearrangementCheck { lhs, rhs, tie })
}

/// `n·L²/σ²`; infinite when `σ = 0`.
pub fn signal_to_noise(n: usize, lipschitz: f64, sigma: f64) -> f64 {
    n as f64 * lipschitz * lipschitz / (sigma * sigma)
}

/// Predicted exponents `(α, β) = (1/(d+4), 1/(d+2))` for the optimal window scale.
pub fn scaling_exponents(d: usize) -> (f64, f64) {
    (1.0 / (d as f64 + 4.0), 1.0 / (d as f64 + 2.0))
}

/// Heuristic check of `n^{−d/2} ≤ σ² ≤ nL²` with unit constants. Runs outside
/// the window are flagged, not rejected.
pub fn in_validity_window(d: usize, n: usize, lipschitz: f64, sigma: f64) -> bool {
    let s2 = sigma * sigma;
    let nf = n as f64;
    s2 >= nf.powf(-(d as f64) / 2.0) && s2 <= nf * lipschitz * lipschitz
}

/// `points` log-spaced values from `min` to `max` inclusive.
pub fn log_grid(min: f64, max: f64, points: usize) -> Result<Vec<f64>> {
    if !(min > 0.0 && max > min && points >= 2) {
        return Err(Error::OutOfRange(format!(
            "log grid needs 0 < min < max and >= 2 points, got [{min}, {max}] x {points}"
        )));
    }
    let (a, b) = (min.ln(), max.ln());
    let step = (b - a) / (points - 1) as f64;
    Ok((0..points)
        .map(|i| match i {
            0 => min,
            i if i == points - 1 => max,
            i => (a + step * i as f64).exp(),
        })
        .collect())
}

/// Paired-difference multiplier used to call two grid points indistinguishable.
pub const ARGMIN_Z: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    pub loss_mean: Vec<f64>,
    pub loss_stderr: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise: Vec<f64>,
    /// Index of the smallest mean loss.
    pub argmin: usize,
    /// Smallest grid value whose loss is within `ARGMIN_Z` paired standard
    /// errors of the minimum.
    pub w_star: f64,
    pub w_star_index: usize,
    /// The selected minimiser sits on a grid endpoint.
    pub boundary: bool,
    pub lambda: Option<f64>,
    pub num_contexts: usize,
}

/// Mean squared query error of `M = w·I` on a pool of contexts, for every `w`
/// in `grid`. All grid points see the same contexts (context `c` comes from
/// substream `c` of `rng`), so differences between them are paired.
pub fn bandwidth_sweep(
    sampler: &ContextSampler,
    grid: &[f64],
    contexts: usize,
    rng: &RngStream,
) -> Result<SweepResult> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::OutOfRange(
            "sweep grid must be nonempty and strictly increasing".into(),
        ));
    }
    if contexts < 100 {
        return Err(Error::OutOfRange(format!(
            "sweep needs >= 100 contexts, got {contexts}"
        )));
    }
    let g = grid.len();
    let sigma2 = sampler.sigma * sampler.sigma;
    // per context: [loss; g] ++ [bias; g] ++ [noise; g]
    let rows: Vec<Vec<f64>> = (0..contexts as u64)
        .into_par_iter()
        .map(|c| {
            let batch = sampler.sample_indexed(rng, c)?;
            let clean = batch.clean_labels();
            let mut out = vec![0.0; 3 * g];
            let inv_m = 1.0 / batch.m() as f64;
            for j in 0..batch.m() {
                let q = batch.queries.row(j);
                let dots = batch.xs.matvec(q)?;
                for (k, &w) in grid.iter().enumerate() {
                    let logits: Vec<f64> = dots.iter().map(|&v| w * v).collect();
                    let s = softmax_from_logits(&logits).weights;
                    let pred = dot(&s, &batch.ys) - batch.targets[j];
                    let clean_err = dot(&s, &clean) - batch.targets[j];
                    out[k] += inv_m * pred * pred;
                    out[g + k] += inv_m * clean_err * clean_err;
                    out[2 * g + k] += inv_m * sigma2 * dot(&s, &s);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let column = |k: usize| rows.iter().map(|r| r[k]).collect::<Vec<f64>>();
    let mut loss_mean = Vec::with_capacity(g);
    let mut loss_stderr = Vec::with_capacity(g);
    let mut bias = Vec::with_capacity(g);
    let mut noise = Vec::with_capacity(g);
    for k in 0..g {
        let (m, se) = mean_stderr(&column(k));
        loss_mean.push(m);
        loss_stderr.push(se);
        bias.push(mean_stderr(&column(g + k)).0);
        noise.push(mean_stderr(&column(2 * g + k)).0);
    }
    let argmin = (0..g)
        .min_by(|&a, &b| loss_mean[a].total_cmp(&loss_mean[b]))
        .unwrap_or(0);
    let w_star_index = (0..g)
        .find(|&k| {
            let diffs: Vec<f64> = rows.iter().map(|r| r[k] - r[argmin]).collect();
            let (gap, se) = mean_stderr(&diffs);
            gap <= ARGMIN_Z * se
        })
        .unwrap_or(argmin);
    let lambda = sampler
        .class
        .lipschitz_parameter()
        .map(|l| signal_to_noise(sampler.n, l, sampler.sigma));
    Ok(SweepResult {
        grid: grid.to_vec(),
        loss_mean,
        loss_stderr,
        bias,
        noise,
        argmin,
        w_star: grid[w_star_index],
        w_star_index,
        boundary: w_star_index == 0 || w_star_index == g - 1,
        lambda,
        num_contexts: contexts,
    })
}

/// Least-squares slope of `log w*` against `log Λ`.
pub fn exponent_fit(lambdas: &[f64], w_stars: &[f64]) -> Result<f64> {
    if lambdas.len() != w_stars.len() {
        return Err(Error::DimensionMismatch {
            expected: lambdas.len(),
            found: w_stars.len(),
        });
    }
    if lambdas.len() < 3 {
        return Err(Error::degenerate("exponent fit needs at least 3 points"));
    }
    if lambdas.iter().chain(w_stars).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::degenerate("exponent fit needs positive finite values"));
    }
    let xs: Vec<f64> = lambdas.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = w_stars.iter().map(|v| v.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::degenerate("exponent fit needs distinct lambdas"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Settings for [`bound_suite`].
#[derive(Clone, Debug)]
pub struct BoundSuiteConfig {
    pub cap_dims: Vec<usize>,
    pub cap_eps: Vec<f64>,
    pub cap_samples: usize,
    pub gamma_dims: Vec<f64>,
    pub gamma_alphas: Vec<f64>,
    /// Extra `m` values checked in the large-`m` regime; every integer below
    /// the regime threshold is always checked.
    pub gamma_large_m: Vec<u64>,
    pub g_dim: usize,
    pub g_n: usize,
    pub g_radii: Vec<f64>,
    pub g_trials: usize,
    pub band: f64,
    pub rearrangement_instances: usize,
}

impl Default for BoundSuiteConfig {
    fn default() -> Self {
        BoundSuiteConfig {
            cap_dims: vec![3, 5, 8],
            cap_eps: vec![0.1, 0.3, 0.5, 1.0],
            cap_samples: 200_000,
            gamma_dims: vec![6.0, 8.0, 10.0],
            gamma_alphas: vec![1.0, 1.5, 2.0],
            gamma_large_m: vec![50, 1000],
            g_dim: 3,
            g_n: 4096,
            g_radii: vec![4.0, 8.0, 16.0],
            g_trials: 50,
            band: THETA_BAND,
            rearrangement_instances: 100,
        }
    }
}

/// Random co-sorted positive pair of length `2..=20` with non-constant `b`.
pub fn random_cosorted_pair(rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
    let len = 2 + (rng.uniform(0.0, 19.0) as usize).min(18);
    let mut a: Vec<f64> = (0..len).map(|_| rng.uniform(0.1, 10.0)).collect();
    let mut b: Vec<f64> = (0..len).map(|_| rng.uniform(0.1, 10.0)).collect();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    (a, b)
}

/// All bound checks: cap measures (plus exact values where known), the gamma
/// bracket in both regimes, `g_0` concentration and random rearrangement
/// instances. Substream `i` of `rng` feeds the `i`-th randomised group.
pub fn bound_suite(cfg: &BoundSuiteConfig, rng: &RngStream) -> Result<Vec<BoundCheck>> {
    let mut checks = Vec::new();
    let mut group = 0u64;
    for &d in &cfg.cap_dims {
        for &eps in &cfg.cap_eps {
            let stream = rng.substream(group);
            group += 1;
            let check = check_cap_measure(d, eps, cfg.cap_samples, &stream)?;
            if let Some(exact) = cap_measure_exact(d, eps) {
                checks.push(BoundCheck::new(
                    format!("cap_measure_exact(d={d},eps={eps})"),
                    check.measured,
                    exact,
                    exact,
                    check.slack,
                ));
            }
            checks.push(check);
        }
    }
    for &d in &cfg.gamma_dims {
        let threshold = gamma_regime_threshold(d);
        let small = (1..).take_while(|&m| (m as f64) < threshold);
        let first_large = threshold.ceil() as u64;
        let large = [first_large, 2 * first_large]
            .into_iter()
            .chain(cfg.gamma_large_m.iter().copied());
        let ms: Vec<u64> = small.chain(large).collect();
        for &alpha in &cfg.gamma_alphas {
            for &m in &ms {
                checks.push(discrete_gamma_bounds(d, alpha, m)?);
            }
        }
    }
    for &r in &cfg.g_radii {
        let stream = rng.substream(group);
        group += 1;
        checks.push(check_g_concentration(
            cfg.g_dim,
            cfg.g_n,
            r,
            cfg.g_trials,
            cfg.band,
            &stream,
        )?);
    }
    let mut stream = rng.substream(group);
    for i in 0..cfg.rearrangement_instances {
        let (a, b) = random_cosorted_pair(&mut stream);
        let mut check = rearrangement_check(&a, &b)?.to_bound_check();
        check.quantity = format!("rearrangement(#{i},len={})", a.len());
        checks.push(check);
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::CovariateDist;
    use crate::tasks::TaskClass;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn g_p_examples() {
        let mut rng = RngStream::new(0, 0);
        let mut xs = Matrix::zeros(7, 4);
        for i in 0..7 {
            xs.row_mut(i).copy_from_slice(&sample_unit_sphere(4, &mut rng).unwrap());
        }
        let x = sample_unit_sphere(4, &mut rng).unwrap();
        assert_eq!(g_p(&xs, &x, 0.0, 0.0).unwrap(), 7.0);
        // one token at distance 1 from x
        let one = [1.0, 0.0];
        let far = Matrix::from_rows(&[[0.5, 0.75f64.sqrt()]]).unwrap();
        assert!((distance(far.row(0), &one) - 1.0).abs() < 1e-15);
        assert!(close(g_p(&far, &one, 2.0, 1.0).unwrap(), (-1.0f64).exp(), 1e-14));
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let v = g_p(&xs, &x, 0.0, 0.2 * k as f64).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(g_p(&xs.scale(2.0), &x, 0.0, 1.0).is_err());
    }

    #[test]
    fn g_mean_matches_closed_form_on_s2() {
        // on S², ‖x_i − x‖² = 2 − 2t with t uniform on [−1, 1], so E e^{−r‖·‖²} = (1 − e^{−4r})/(4r)
        let rng = RngStream::new(5, 0);
        for r in [0.5, 2.0, 8.0] {
            let check = check_g_concentration(3, 4096, r, 30, THETA_BAND, &rng).unwrap();
            let exact = (1.0 - (-4.0 * r).exp()) / (4.0 * r);
            assert!((check.measured - exact).abs() < 0.1 * exact, "r={r}");
        }
    }

    #[test]
    fn g_concentration_regimes() {
        let rng = RngStream::new(1, 0);
        let zero = check_g_concentration(3, 64, 0.0, 3, THETA_BAND, &rng).unwrap();
        assert_eq!(zero.measured, 1.0);
        assert!(zero.pass);
        let c = check_g_concentration(3, 4096, 8.0, 50, THETA_BAND, &rng).unwrap();
        assert!(c.pass, "{c:?}");
        let r0 = g_regime_threshold(3);
        let ratio = r0.powf(-1.5) / (-2.0 * r0).exp();
        assert!((1.0 / THETA_BAND..=THETA_BAND).contains(&ratio));
        assert!(check_g_concentration(3, 16, 1.0, 5, THETA_BAND, &rng).is_err());
    }

    #[test]
    fn cap_examples() {
        let rng = RngStream::new(2, 0);
        assert_eq!(cap_measure_mc(4, 2.0, 5000, &rng).unwrap(), 1.0);
        let samples = 100_000;
        let p = cap_measure_mc(3, 0.5, samples, &rng).unwrap();
        assert!((p - 0.25).abs() < 3.0 * (0.25 * 0.75 / samples as f64).sqrt());
        let p2 = cap_measure_mc(2, 1.0, samples, &rng).unwrap();
        assert!((p2 - 0.5).abs() < 4.0 * (0.25 / samples as f64).sqrt());
        assert_eq!(cap_measure_exact(2, 1.0), Some(0.5));

        let (lo, hi) = cap_measure_bounds(3, 1.0).unwrap();
        assert!(close(lo, 1.0 / (6.0 * PI).sqrt(), 1e-14) && hi == 1.0);
        assert!((lo - 0.2303).abs() < 1e-4);
        let (lo, hi) = cap_measure_bounds(3, 0.5).unwrap();
        assert!((lo - 0.1727).abs() < 1e-4 && close(hi, 0.75, 1e-14));
        let (lo, hi) = cap_measure_bounds(6, 1e-9).unwrap();
        assert!(lo < 1e-20 && hi < 1e-20);
        assert!(cap_measure_bounds(3, 1.5).is_err());
    }

    #[test]
    fn gamma_examples() {
        assert!(close(discrete_gamma(0.0, 1.3, 1).unwrap(), (-1.3f64).exp(), 1e-15));
        let two = (-1.0f64).exp() + 2.0 * (-2.0f64).exp();
        assert!(close(discrete_gamma(1.0, 1.0, 2).unwrap(), two, 1e-15));
        assert!((two - 0.638550).abs() < 1e-6);
        let mut prev = 0.0;
        for m in 1..60 {
            let v = discrete_gamma(7.0, 1.5, m).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        assert!(discrete_gamma(3.0, 1.0, 0).is_err());
        // huge d stays finite through the log-space sum
        assert!(discrete_gamma(150.0, 1.0, 400).unwrap().is_finite());
    }

    #[test]
    fn gamma_matches_naive_sum() {
        for d in [0.0, 1.0, 6.0, 12.0, 20.0] {
            for alpha in [1.0, 1.5, 2.0] {
                for m in [1, 7, 30, 200, 10_000] {
                    let naive: f64 = (1..=m).map(|i| (i as f64).powf(d) * (-alpha * i as f64).exp()).sum();
                    let v = discrete_gamma(d, alpha, m).unwrap();
                    assert!(((v - naive) / naive).abs() < 1e-12, "d={d} a={alpha} m={m}");
                }
            }
        }
    }

    #[test]
    fn ln_gamma_against_factorials() {
        let mut fact = 1.0f64;
        for k in 1..=30u32 {
            fact *= k as f64;
            let x = k as f64 + 1.0;
            assert!((ln_gamma(x) - fact.ln()).abs() < 1e-10 * fact.ln().max(1.0), "k={k}");
        }
        assert!((ln_gamma(0.5) - PI.sqrt().ln()).abs() < 1e-12);
        assert!(ln_gamma(1.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_bracket_examples() {
        let c = discrete_gamma_bounds(6.0, 1.0, 20).unwrap();
        assert!(close(c.lower, 360.0, 1e-10) && close(c.upper, 1440.0, 1e-10));
        assert!(c.pass);
        let c = discrete_gamma_bounds(6.0, 2.0, 3).unwrap();
        assert!(close(c.lower, 729.0 * (-6.5f64).exp(), 1e-12));
        assert!(close(c.upper, 2187.0 * (-6.5f64).exp(), 1e-12));
        assert!(c.pass);
        // m = 1: γ = e^{−α} while the upper end is e^{−α−1/2}, so the bracket misses
        let c = discrete_gamma_bounds(7.0, 1.2, 1).unwrap();
        assert!(close(c.measured, (-1.2f64).exp(), 1e-15));
        assert!(close(c.upper, (-1.7f64).exp(), 1e-15));
        assert!(!c.pass);
        assert!(discrete_gamma_bounds(5.0, 1.0, 10).is_err());
        assert!(discrete_gamma_bounds(6.0, 2.5, 10).is_err());
    }

    #[test]
    fn rearrangement_examples() {
        let r = rearrangement_check(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!(close(r.lhs, 5.0 / 9.0, 1e-15) && close(r.rhs, 17.0 / 25.0, 1e-15));
        assert!(r.strict() && !r.tie);
        let t = rearrangement_check(&[1.0, 3.0, 4.0], &[2.0, 2.0, 2.0]).unwrap();
        assert!(t.tie && (t.lhs - t.rhs).abs() < 1e-15);
        assert!(t.to_bound_check().pass);
        assert!(matches!(
            rearrangement_check(&[1.0, 2.0], &[2.0, 1.0]),
            Err(Error::PreconditionViolated(_))
        ));
        let mut rng = RngStream::new(3, 0);
        for _ in 0..100 {
            let (a, b) = random_cosorted_pair(&mut rng);
            assert!(rearrangement_check(&a, &b).unwrap().strict());
        }
    }

    #[test]
    fn exponent_fit_examples() {
        let lambdas = [10.0, 100.0, 1000.0, 1e4];
        let pow: Vec<f64> = lambdas.iter().map(|l: &f64| l.powf(0.2)).collect();
        assert!((exponent_fit(&lambdas, &pow).unwrap() - 0.2).abs() < 1e-10);
        assert!(exponent_fit(&lambdas, &[3.0; 4]).unwrap().abs() < 1e-12);
        assert!(exponent_fit(&lambdas, &[1.0, -1.0, 2.0, 3.0]).is_err());
        assert!(exponent_fit(&lambdas[..2], &pow[..2]).is_err());
        let (alpha, beta) = scaling_exponents(5);
        assert!((alpha - 1.0 / 9.0).abs() < 1e-15 && (beta - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(0.5, 200.0, 25).unwrap();
        assert_eq!(g.len(), 25);
        assert_eq!((g[0], g[24]), (0.5, 200.0));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    fn sweep_sampler(class: TaskClass, sigma: f64) -> ContextSampler {
        ContextSampler {
            class,
            dist: CovariateDist::uniform(3).unwrap(),
            n: 30,
            m: 5,
            sigma,
        }
    }

    #[test]
    fn constant_tasks_prefer_flat_attention() {
        let grid = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
        let s = sweep_sampler(TaskClass::Affine { lipschitz: 0.0 }, 0.3);
        let r = bandwidth_sweep(&s, &grid, 200, &RngStream::new(4, 0)).unwrap();
        assert!(r.noise.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(r.w_star, 0.0);
        assert!(r.boundary);
    }

    #[test]
    fn noiseless_sweep_has_zero_noise_part() {
        let grid = log_grid(0.5, 50.0, 8).unwrap();
        let s = sweep_sampler(TaskClass::Relu2 { lipschitz: 1.0 }, 0.0);
        let rng = RngStream::new(6, 0);
        let r = bandwidth_sweep(&s, &grid, 150, &rng).unwrap();
        assert!(r.noise.iter().all(|&v| v == 0.0));
        assert_eq!(r.loss_mean, r.bias);
        assert!(r.loss_mean[7] < r.loss_mean[0]);
        assert_eq!(r.lambda, Some(f64::INFINITY));
        assert_eq!(bandwidth_sweep(&s, &grid, 150, &rng).unwrap(), r);
        assert!(bandwidth_sweep(&s, &[2.0, 1.0], 150, &rng).is_err());
    }
}
