//! Reference MCMC estimator for small instances.
//!
//! Gibbs sampling with latent-utility data augmentation in the differenced
//! space. Three blocks per sweep:
//!
//! 1. **Latent utilities** — each differenced utility coordinate is drawn
//!    from its univariate normal conditional (derived from the joint
//!    `N(ΔX·a, ΔΣ)`), truncated to the region consistent with the observed
//!    choice. Observations are independent given the parameters, so this
//!    block may run in parallel; every `(sweep, observation)` pair owns its
//!    own random stream, keeping results identical across thread counts.
//! 2. **Taste vector** — conjugate Gaussian update with a `N(0, τ⁻¹I)`
//!    prior: precision `P = τI + Σᵢ ΔXᵢᵀ Ω ΔXᵢ` and mean
//!    `P⁻¹ Σᵢ ΔXᵢᵀ Ω Δuᵢ`, where `Ω = ΔΣ⁻¹`.
//! 3. **Utility covariance** — conjugate inverse-Wishart update with prior
//!    degrees `d + 1` and identity scale; the posterior
//!    `IW(d + 1 + n, I + Σᵢ rᵢrᵢᵀ)` is sampled through a Bartlett
//!    decomposition.
//!
//! The chain itself runs on the unnormalized `(a, ΔΣ)` pair; every retained
//! draw is post-processed onto the identified scale — `ΔΣ` is trace
//! normalized and `a` rescaled by `√((d−1)/trace(ΔΣ))` — so the stored
//! draws are directly comparable with the variational estimates.
//!
//! Each coordinate update inverts conditionals of a `(d−1)`-dimensional
//! Gaussian, so cost grows quickly with the number of alternatives; the
//! sampler is capped at `d <= 10` and larger panels should use the
//! variational path.

use crate::matrix::Matrix;
use crate::model::{
    choose_index, trace_normalize, ChoiceDataset, ModelError, ModelParams, Utilities,
};
use crate::rng::{RngStream, StreamDomain};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::time::Instant;

/// Largest number of alternatives the sampler accepts.
pub const MAX_GIBBS_D: usize = 10;

/// Intervals narrower than this are collapsed to their midpoint.
const DEGENERATE_WIDTH: f64 = 1e-12;

/// Probability floor keeping the inverse CDF away from `0` and `1`.
const U_FLOOR: f64 = 1e-12;

/// Gaussian prior precision for the taste vector.
const DEFAULT_PRIOR_PRECISION: f64 = 0.01;

/// Stream key (`b` component) reserved for the taste block of a sweep.
const TASTE_STREAM_KEY: u64 = u32::MAX as u64;
/// Stream key (`b` component) reserved for the covariance block of a sweep.
const COVARIANCE_STREAM_KEY: u64 = u32::MAX as u64 - 1;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal is well-formed")
}

/// Sampler configuration.
///
/// `iterations` counts total sweeps including burn-in; after discarding the
/// first `burn_in` sweeps, every `thinning`-th draw is retained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsConfig {
    /// Total sweeps, burn-in included.
    pub iterations: usize,
    /// Sweeps discarded from the front of the chain.
    pub burn_in: usize,
    /// Keep every `thinning`-th sweep after burn-in (1 keeps all).
    pub thinning: usize,
    /// Prior precision `τ` of the `N(0, τ⁻¹I)` prior on the taste vector.
    pub prior_precision: f64,
    /// Seed for all random streams used by the sampler.
    pub seed: u64,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            iterations: 2000,
            burn_in: 500,
            thinning: 1,
            prior_precision: DEFAULT_PRIOR_PRECISION,
            seed: 0,
        }
    }
}

impl GibbsConfig {
    /// Checks the configuration against a dataset with `d` alternatives.
    pub fn validate(&self, d: usize) -> Result<(), ModelError> {
        if self.iterations == 0 {
            return Err(ModelError::InvalidParams(
                "gibbs: iterations must be at least 1".into(),
            ));
        }
        if self.burn_in >= self.iterations {
            return Err(ModelError::InvalidParams(format!(
                "gibbs: burn_in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thinning == 0 {
            return Err(ModelError::InvalidParams(
                "gibbs: thinning must be at least 1".into(),
            ));
        }
        if !(self.prior_precision > 0.0 && self.prior_precision.is_finite()) {
            return Err(ModelError::InvalidParams(format!(
                "gibbs: prior_precision must be positive and finite, got {}",
                self.prior_precision
            )));
        }
        if d > MAX_GIBBS_D {
            return Err(ModelError::InvalidParams(format!(
                "gibbs: sampler supports at most d = {MAX_GIBBS_D} alternatives, got {d}; \
                 use the variational estimator for larger panels"
            )));
        }
        Ok(())
    }
}

/// Counters for numerical edge cases inside [`truncated_normal`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationCounters {
    /// Intervals narrower than `1e-12` collapsed to their midpoint.
    pub degenerate_intervals: usize,
    /// Draws that landed outside the interval and were clamped back in.
    pub clamped_draws: usize,
    /// Calls whose bounds arrived crossed and were widened before sampling.
    pub crossed_bounds: usize,
}

impl TruncationCounters {
    fn merge(&mut self, other: TruncationCounters) {
        self.degenerate_intervals += other.degenerate_intervals;
        self.clamped_draws += other.clamped_draws;
        self.crossed_bounds += other.crossed_bounds;
    }
}

/// Draws from `N(mean, sd²)` restricted to `(lower, upper)` by inverting the
/// CDF on a uniform clipped to `[1e-12, 1 - 1e-12]`.
///
/// Either bound may be infinite. Intervals narrower than `1e-12` return the
/// midpoint; crossed bounds are widened around their midpoint before
/// sampling; a draw pushed outside the interval by round-off is clamped
/// back in. Use [`truncated_normal_counted`] to observe how often those
/// fallbacks fire.
pub fn truncated_normal(mean: f64, sd: f64, lower: f64, upper: f64, rng: &mut RngStream) -> f64 {
    let mut counters = TruncationCounters::default();
    truncated_normal_counted(mean, sd, lower, upper, rng, &mut counters)
}

/// [`truncated_normal`] variant that records numerical fallbacks.
pub fn truncated_normal_counted(
    mean: f64,
    sd: f64,
    lower: f64,
    upper: f64,
    rng: &mut RngStream,
    counters: &mut TruncationCounters,
) -> f64 {
    debug_assert!(sd.is_finite() && sd > 0.0, "sd must be positive, got {sd}");
    debug_assert!(mean.is_finite(), "mean must be finite, got {mean}");
    let (lower, upper) = if lower > upper {
        // Bounds can only cross through floating-point cancellation in the
        // caller; recover by widening symmetrically around the midpoint.
        counters.crossed_bounds += 1;
        let mid = 0.5 * (lower + upper);
        let width = (lower - upper).abs().max(DEGENERATE_WIDTH);
        (mid - width, mid + width)
    } else {
        (lower, upper)
    };
    if lower.is_finite() && upper.is_finite() && upper - lower < DEGENERATE_WIDTH {
        counters.degenerate_intervals += 1;
        return 0.5 * (lower + upper);
    }
    let normal = std_normal();
    let cdf_lo = if lower.is_finite() {
        normal.cdf((lower - mean) / sd)
    } else {
        0.0
    };
    let cdf_hi = if upper.is_finite() {
        normal.cdf((upper - mean) / sd)
    } else {
        1.0
    };
    let span = cdf_hi - cdf_lo;
    if !(span > 0.0) || !span.is_finite() {
        // The interval carries no representable probability mass (deep
        // tail); fall back to the closest in-interval point.
        counters.clamped_draws += 1;
        return if lower.is_finite() && upper.is_finite() {
            0.5 * (lower + upper)
        } else if lower.is_finite() {
            lower
        } else {
            upper
        };
    }
    let u = (cdf_lo + span * rng.uniform()).clamp(U_FLOOR, 1.0 - U_FLOOR);
    let x = mean + sd * normal.inverse_cdf(u);
    if x < lower || x > upper {
        counters.clamped_draws += 1;
        return x.clamp(lower, upper);
    }
    x
}

/// Retained posterior draws on the identified scale, plus run diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDraws {
    d: usize,
    p: usize,
    /// Retained taste draws, rescaled by `√((d−1)/trace(ΔΣ))`.
    pub a_draws: Vec<Vec<f64>>,
    /// Retained trace-normalized covariance draws, each `(d−1)×(d−1)`.
    pub sigma_draws: Vec<Matrix>,
    /// Wall-clock seconds spent in the sampler.
    pub seconds: f64,
    /// Numerical fallbacks observed across all truncated draws.
    pub truncation: TruncationCounters,
    /// Retained-sweep latent vectors that failed to reproduce their choice.
    pub latent_violations: usize,
}

impl PosteriorDraws {
    /// Number of alternatives in the fitted model.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of taste coefficients.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of retained draws.
    pub fn len(&self) -> usize {
        self.a_draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_draws.is_empty()
    }

    /// Posterior mean of the taste vector.
    pub fn posterior_mean_a(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.p];
        for draw in &self.a_draws {
            for (m, v) in mean.iter_mut().zip(draw) {
                *m += v;
            }
        }
        let scale = 1.0 / self.a_draws.len() as f64;
        for m in &mut mean {
            *m *= scale;
        }
        mean
    }

    /// Posterior mean of the trace-normalized covariance.
    pub fn posterior_mean_sigma(&self) -> Matrix {
        let k = self.d - 1;
        let mut mean = Matrix::zeros(k, k);
        for draw in &self.sigma_draws {
            for (m, v) in mean.as_mut_slice().iter_mut().zip(draw.as_slice()) {
                *m += v;
            }
        }
        let scale = 1.0 / self.sigma_draws.len() as f64;
        for m in mean.as_mut_slice() {
            *m *= scale;
        }
        mean
    }

    /// Posterior-mean point estimate packaged as model parameters.
    pub fn model_params(&self) -> Result<ModelParams, ModelError> {
        ModelParams::from_covariance(self.d, self.posterior_mean_a(), &self.posterior_mean_sigma())
    }
}

/// Fits the model by Gibbs sampling and returns the retained draws.
///
/// Fails on invalid configurations, on more than [`MAX_GIBBS_D`]
/// alternatives, and on numerical breakdown inside the linear-algebra
/// blocks. Latent draws reproduce the observed choices by construction;
/// retained-sweep violations (possible only through clamped truncations)
/// are counted and asserted absent in debug builds.
pub fn gibbs_fit(data: &ChoiceDataset, config: &GibbsConfig) -> Result<PosteriorDraws, ModelError> {
    let started = Instant::now();
    let d = data.d();
    let k = d - 1;
    let p = data.p();
    let n = data.n();
    config.validate(d)?;

    let dx: Vec<Matrix> = (0..n).map(|i| data.differenced_design(i)).collect();

    let mut a = vec![0.0; p];
    let mut sigma = Matrix::identity(k);
    let mut du: Vec<Vec<f64>> = (0..n).map(|i| initial_latent(data.choice(i), k)).collect();

    let retain_cap = (config.iterations - config.burn_in).div_ceil(config.thinning);
    let mut a_draws = Vec::with_capacity(retain_cap);
    let mut sigma_draws = Vec::with_capacity(retain_cap);
    let mut truncation = TruncationCounters::default();
    let mut latent_violations = 0usize;

    for sweep in 0..config.iterations {
        let omega = sigma.inverse_pd()?;

        // Block 1: latent utilities, one observation per stream.
        let sweep_stats: Vec<(TruncationCounters, bool)> = du
            .par_iter_mut()
            .enumerate()
            .map(|(i, latent)| {
                let mut rng =
                    RngStream::keyed(config.seed, StreamDomain::Gibbs, sweep as u64, i as u64);
                let mut counters = TruncationCounters::default();
                let mean = dx[i].matvec(&a);
                update_latent(latent, &mean, &omega, data.choice(i), &mut rng, &mut counters);
                let reproduced =
                    choose_index(&Utilities::Differenced(latent.clone()), 0.0) == data.choice(i);
                debug_assert!(
                    reproduced,
                    "latent draw for observation {i} fails to reproduce its choice"
                );
                (counters, reproduced)
            })
            .collect();
        let mut sweep_violations = 0usize;
        for (counters, reproduced) in sweep_stats {
            truncation.merge(counters);
            sweep_violations += usize::from(!reproduced);
        }

        // Block 2: taste vector given latents and covariance.
        let mut rng_a =
            RngStream::keyed(config.seed, StreamDomain::Gibbs, sweep as u64, TASTE_STREAM_KEY);
        a = draw_taste(&dx, &du, &omega, config.prior_precision, &mut rng_a)?;

        // Block 3: covariance given latents and taste vector.
        let mut scale = Matrix::identity(k);
        for (x, latent) in dx.iter().zip(&du) {
            let fitted = x.matvec(&a);
            let scale_entries = scale.as_mut_slice();
            for r in 0..k {
                let rr = latent[r] - fitted[r];
                for c in 0..k {
                    scale_entries[r * k + c] += rr * (latent[c] - fitted[c]);
                }
            }
        }
        let degrees = (d + 1 + n) as f64;
        let mut rng_sigma = RngStream::keyed(
            config.seed,
            StreamDomain::Gibbs,
            sweep as u64,
            COVARIANCE_STREAM_KEY,
        );
        sigma = sample_inverse_wishart(degrees, &scale, &mut rng_sigma)?;

        // Retain on the identified scale; the chain itself stays unnormalized.
        if sweep >= config.burn_in && (sweep - config.burn_in) % config.thinning == 0 {
            let rescale = (k as f64 / sigma.trace()).sqrt();
            a_draws.push(a.iter().map(|v| v * rescale).collect());
            sigma_draws.push(trace_normalize(&sigma)?);
            latent_violations += sweep_violations;
        }
    }

    Ok(PosteriorDraws {
        d,
        p,
        a_draws,
        sigma_draws,
        seconds: started.elapsed().as_secs_f64(),
        truncation,
        latent_violations,
    })
}

/// Starting latent vector strictly inside the choice-consistent region.
fn initial_latent(choice: usize, k: usize) -> Vec<f64> {
    let mut latent = vec![-0.5; k];
    if choice > 0 {
        latent[choice - 1] = 0.5;
    }
    latent
}

/// One single-site pass over the latent coordinates of an observation.
///
/// Coordinate `j` keeps its univariate normal conditional under
/// `N(mean, Ω⁻¹)` — variance `1/Ω[j][j]`, mean shifted by the current
/// residuals of the other coordinates — truncated to the interval that
/// keeps the observed choice:
///
/// * choice `0` (outside option): every coordinate below zero;
/// * choice `c >= 1`: coordinate `c−1` above both zero and every other
///   coordinate, the rest below coordinate `c−1`.
fn update_latent(
    latent: &mut [f64],
    mean: &[f64],
    omega: &Matrix,
    choice: usize,
    rng: &mut RngStream,
    counters: &mut TruncationCounters,
) {
    let k = latent.len();
    for j in 0..k {
        let precision = omega.get(j, j);
        let cond_sd = precision.recip().sqrt();
        let mut shift = 0.0;
        for l in 0..k {
            if l != j {
                shift += omega.get(j, l) * (latent[l] - mean[l]);
            }
        }
        let cond_mean = mean[j] - shift / precision;
        let (lower, upper) = if choice == 0 {
            (f64::NEG_INFINITY, 0.0)
        } else {
            let winner = choice - 1;
            if j == winner {
                let mut floor = 0.0;
                for (l, &v) in latent.iter().enumerate() {
                    if l != j && v > floor {
                        floor = v;
                    }
                }
                (floor, f64::INFINITY)
            } else {
                (f64::NEG_INFINITY, latent[winner])
            }
        };
        latent[j] = truncated_normal_counted(cond_mean, cond_sd, lower, upper, rng, counters);
    }
}

/// Conjugate Gaussian draw of the taste vector.
///
/// Posterior precision `P = τI + Σᵢ ΔXᵢᵀ Ω ΔXᵢ` and mean
/// `P⁻¹ Σᵢ ΔXᵢᵀ Ω Δuᵢ`; the draw is `mean + L⁻ᵀz` with `P = LLᵀ`.
fn draw_taste(
    dx: &[Matrix],
    du: &[Vec<f64>],
    omega: &Matrix,
    prior_precision: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>, ModelError> {
    let p = dx[0].cols();
    let mut precision = Matrix::identity(p).scale(prior_precision);
    let mut rhs = vec![0.0; p];
    for (x, latent) in dx.iter().zip(du) {
        let xtw = x.matmul_transpose_a(omega);
        let contribution = xtw.matmul(x);
        for (acc, v) in precision
            .as_mut_slice()
            .iter_mut()
            .zip(contribution.as_slice())
        {
            *acc += v;
        }
        for (acc, v) in rhs.iter_mut().zip(xtw.matvec(latent)) {
            *acc += v;
        }
    }
    let chol = precision.cholesky()?;
    let mean = solve_lower_transpose(&chol, &solve_lower(&chol, &rhs));
    let z = rng.normal_vec(p);
    let noise = solve_lower_transpose(&chol, &z);
    Ok(mean.iter().zip(noise).map(|(m, w)| m + w).collect())
}

/// Inverse-Wishart draw via a Bartlett decomposition.
///
/// With `V = scale⁻¹ = LLᵀ` and a lower-triangular `A` holding
/// `√(χ²_{df−i})` on diagonal entry `i` (zero-based) and standard normals
/// below it, `W = (LA)(LA)ᵀ` is Wishart`(df, V)` and `W⁻¹` the requested
/// inverse-Wishart`(df, scale)` variate. `A`'s entries are drawn row-major,
/// the diagonal entry last within its row.
fn sample_inverse_wishart(
    df: f64,
    scale: &Matrix,
    rng: &mut RngStream,
) -> Result<Matrix, ModelError> {
    let k = scale.rows();
    debug_assert!(df > (k - 1) as f64, "inverse-Wishart needs df > k - 1");
    let chol = scale.inverse_pd()?.cholesky()?;
    let mut bartlett = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..i {
            bartlett.set(i, j, rng.standard_normal());
        }
        bartlett.set(i, i, rng.chi_squared(df - i as f64).sqrt());
    }
    let factor_inv = invert_lower(&chol.matmul(&bartlett));
    Ok(factor_inv.matmul_transpose_a(&factor_inv))
}

/// Solves `L y = b` for lower-triangular `L` by forward substitution.
fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = b[i];
        for j in 0..i {
            acc -= l.get(i, j) * y[j];
        }
        y[i] = acc / l.get(i, i);
    }
    y
}

/// Solves `Lᵀ x = b` for lower-triangular `L` by back substitution.
fn solve_lower_transpose(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in i + 1..n {
            acc -= l.get(j, i) * x[j];
        }
        x[i] = acc / l.get(i, i);
    }
    x
}

/// Inverts a lower-triangular matrix column by column.
fn invert_lower(l: &Matrix) -> Matrix {
    let n = l.rows();
    let mut inv = Matrix::zeros(n, n);
    for col in 0..n {
        inv.set(col, col, l.get(col, col).recip());
        for i in col + 1..n {
            let mut acc = 0.0;
            for j in col..i {
                acc -= l.get(i, j) * inv.get(j, col);
            }
            inv.set(i, col, acc / l.get(i, i));
        }
    }
    inv
}
