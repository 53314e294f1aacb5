//! Core multinomial-probit types: choice data, model parameters in the
//! differenced utility space, the difference operator, the deterministic
//! choice rule, and the trace-restriction identification transform.
//!
//! Conventions used throughout the crate:
//! * alternatives are 0-based internally; alternative 0 is the baseline;
//! * "differenced" quantities live in the (d−1)-dimensional space obtained
//!   by subtracting the baseline utility from the others;
//! * the differenced covariance is identified only up to scale, so it is
//!   always converted to its trace-normalized form before use in losses,
//!   metrics, or reports.

use crate::matrix::{Matrix, MatrixError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("trace must be positive, got {0}")]
    NonPositiveTrace(f64),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Numerically stable softplus `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of softplus: the logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus on (0, ∞): `ln(eʸ − 1)`.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv requires a positive argument");
    if y > 30.0 {
        // e^y dominates; the -1 is below double precision.
        y
    } else {
        (y.exp_m1()).ln()
    }
}

/// A set of observed choices with their design matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceDataset {
    d: usize,
    p: usize,
    /// 0-based chosen alternative per observation.
    choices: Vec<usize>,
    /// All design matrices, flattened row-major `n × (d·p)`.
    designs: Vec<f64>,
    /// Provenance carried through file round-trips: layout name and the seed
    /// the data was generated from (0 / "custom" for hand-built data).
    pub layout: String,
    pub seed: u64,
}

impl ChoiceDataset {
    pub fn new(
        d: usize,
        p: usize,
        choices: Vec<usize>,
        designs: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if d < 2 {
            return Err(ModelError::InvalidDataset(format!("need d >= 2, got {d}")));
        }
        if p < 1 {
            return Err(ModelError::InvalidDataset("need p >= 1".into()));
        }
        let n = choices.len();
        if n == 0 {
            return Err(ModelError::InvalidDataset("need at least one observation".into()));
        }
        if designs.len() != n * d * p {
            return Err(ModelError::InvalidDataset(format!(
                "designs hold {} entries, expected n*d*p = {}",
                designs.len(),
                n * d * p
            )));
        }
        if let Some(i) = choices.iter().position(|&y| y >= d) {
            return Err(ModelError::InvalidDataset(format!(
                "observation {i} chooses alternative {} (0-based) but d = {d}",
                choices[i]
            )));
        }
        if let Some(k) = designs.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::InvalidDataset(format!(
                "non-finite design entry in observation {}",
                k / (d * p)
            )));
        }
        Ok(ChoiceDataset {
            d,
            p,
            choices,
            designs,
            layout: "custom".to_string(),
            seed: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.choices.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// 0-based chosen alternative of observation `i`.
    pub fn choice(&self, i: usize) -> usize {
        self.choices[i]
    }

    /// All choices, 0-based.
    pub fn choices(&self) -> &[usize] {
        &self.choices
    }

    /// All designs, flat n×d×p row-major.
    pub fn designs(&self) -> &[f64] {
        &self.designs
    }

    pub fn one_hot(&self, i: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.d];
        y[self.choices[i]] = 1.0;
        y
    }

    /// Row-major view of observation `i`'s d×p design matrix.
    pub fn design_slice(&self, i: usize) -> &[f64] {
        &self.designs[i * self.d * self.p..(i + 1) * self.d * self.p]
    }

    pub fn design(&self, i: usize) -> Matrix {
        Matrix::from_vec(self.d, self.p, self.design_slice(i).to_vec())
            .expect("stored designs are validated")
    }

    /// Differenced design ΔXᵢ = C·Xᵢ, computed on the fly.
    pub fn differenced_design(&self, i: usize) -> Matrix {
        let x = self.design_slice(i);
        let (d, p) = (self.d, self.p);
        let mut out = Matrix::zeros(d - 1, p);
        for r in 0..d - 1 {
            for c in 0..p {
                out.set(r, c, x[(r + 1) * p + c] - x[c]);
            }
        }
        out
    }

    /// Subset of observations (used for splits and bootstrap resamples);
    /// indices may repeat.
    pub fn subset(&self, indices: &[usize]) -> ChoiceDataset {
        let dp = self.d * self.p;
        let mut choices = Vec::with_capacity(indices.len());
        let mut designs = Vec::with_capacity(indices.len() * dp);
        for &i in indices {
            choices.push(self.choices[i]);
            designs.extend_from_slice(self.design_slice(i));
        }
        ChoiceDataset {
            d: self.d,
            p: self.p,
            choices,
            designs,
            layout: self.layout.clone(),
            seed: self.seed,
        }
    }
}

/// Latent utilities, tagged by the space they live in.
#[derive(Debug, Clone, PartialEq)]
pub enum Utilities {
    /// Length-d vector of full-space utilities.
    Full(Vec<f64>),
    /// Length-(d−1) vector of baseline-differenced utilities.
    Differenced(Vec<f64>),
}

/// Lowest index attaining the maximum within `tie_tol`.
fn argmax_with_tol(xs: &[f64], tie_tol: f64) -> usize {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    xs.iter()
        .position(|&x| x >= max - tie_tol)
        .expect("non-empty utilities")
}

/// The deterministic choice rule, returned as a one-hot vector.
///
/// Full space: the alternative with maximal utility. Differenced space:
/// alternative 0 (the baseline) when every differenced utility is negative,
/// otherwise `1 + argmax(Δu)`. Ties are broken by lowest index; `tie_tol`
/// widens what counts as a tie (0 recovers exact argmax).
pub fn choose(u: &Utilities, tie_tol: f64) -> Vec<f64> {
    let (len, idx) = match u {
        Utilities::Full(v) => (v.len(), argmax_with_tol(v, tie_tol)),
        Utilities::Differenced(dv) => (dv.len() + 1, choose_differenced(dv, tie_tol)),
    };
    let mut y = vec![0.0; len];
    y[idx] = 1.0;
    y
}

/// Index form of [`choose`].
pub fn choose_index(u: &Utilities, tie_tol: f64) -> usize {
    match u {
        Utilities::Full(v) => argmax_with_tol(v, tie_tol),
        Utilities::Differenced(dv) => choose_differenced(dv, tie_tol),
    }
}

#[inline]
pub(crate) fn choose_differenced(dv: &[f64], tie_tol: f64) -> usize {
    let max = dv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max < 0.0 {
        0
    } else {
        1 + dv.iter().position(|&x| x >= max - tie_tol).expect("non-empty")
    }
}

/// The (d−1)×d difference operator `C`: column 0 is all −1, columns 1…d−1
/// form the identity. Applying it subtracts the baseline row/entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DifferenceOperator {
    d: usize,
}

impl DifferenceOperator {
    pub fn new(d: usize) -> Self {
        assert!(d >= 2, "difference operator needs d >= 2");
        DifferenceOperator { d }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Materialize C as a dense matrix (tests and oracles; the apply_*
    /// methods never build it).
    pub fn dense(&self) -> Matrix {
        let mut c = Matrix::zeros(self.d - 1, self.d);
        for i in 0..self.d - 1 {
            c.set(i, 0, -1.0);
            c.set(i, i + 1, 1.0);
        }
        c
    }

    /// C·v for a length-d vector.
    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.d, "apply_vec expects a length-d vector");
        v[1..].iter().map(|x| x - v[0]).collect()
    }

    /// C·M for a d-row matrix: row i of the result is row i+1 minus row 0.
    pub fn apply_mat(&self, m: &Matrix) -> Matrix {
        assert_eq!(m.rows(), self.d, "apply_mat expects d rows");
        let mut out = Matrix::zeros(self.d - 1, m.cols());
        for i in 0..self.d - 1 {
            let top = m.row(i + 1).to_vec();
            let base = m.row(0);
            let row = out.row_mut(i);
            for (o, (t, b)) in row.iter_mut().zip(top.iter().zip(base)) {
                *o = t - b;
            }
        }
        out
    }
}

/// ΔX = C·X: row j of ΔX is row j+1 of X minus row 0.
pub fn difference_design(x: &Matrix) -> Matrix {
    DifferenceOperator::new(x.rows()).apply_mat(x)
}

/// Push a full-space Gaussian (μ, Σ) through the difference operator:
/// returns (Δμ = C·μ, ΔΣ = C·Σ·Cᵀ). The output covariance is PD whenever Σ
/// is, because C has full row rank.
pub fn difference_gaussian(mu: &[f64], sigma: &Matrix) -> (Vec<f64>, Matrix) {
    let d = mu.len();
    assert_eq!((sigma.rows(), sigma.cols()), (d, d), "sigma must be d×d");
    let c = DifferenceOperator::new(d);
    let dmu = c.apply_vec(mu);
    let mut dsig = Matrix::zeros(d - 1, d - 1);
    for i in 0..d - 1 {
        for j in 0..d - 1 {
            let v = sigma.get(i + 1, j + 1) - sigma.get(0, j + 1) - sigma.get(i + 1, 0)
                + sigma.get(0, 0);
            dsig.set(i, j, v);
        }
    }
    (dmu, dsig)
}

/// Rescale a differenced covariance so its trace equals d−1 (its own
/// dimension): ΔΣ̄ = ((d−1)/tr ΔΣ)·ΔΣ. Correlations are untouched.
pub fn trace_normalize(dsigma: &Matrix) -> Result<Matrix, ModelError> {
    assert_eq!(dsigma.rows(), dsigma.cols(), "trace_normalize needs a square matrix");
    let t = dsigma.trace();
    if !(t > 0.0) {
        return Err(ModelError::NonPositiveTrace(t));
    }
    Ok(dsigma.scale(dsigma.rows() as f64 / t))
}

/// Model parameters θ^Δ: the taste vector `a` and an unconstrained
/// parameterization of the differenced covariance.
///
/// The covariance block stores a Cholesky factor G of ΔΣ = G·Gᵀ as
/// `[raw diagonal (k entries, mapped through softplus) | strict lower
/// triangle, row-major (k(k−1)/2 entries)]` with k = d−1. Any real vector
/// therefore yields a PD covariance — stochastic updates can never leave
/// the PD cone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelParamsRepr", into = "ModelParamsRepr")]
pub struct ModelParams {
    d: usize,
    pub a: Vec<f64>,
    cov: Vec<f64>,
}

/// Serialized form of [`ModelParams`]; deserialization revalidates through
/// [`ModelParams::from_raw`].
#[derive(Serialize, Deserialize)]
struct ModelParamsRepr {
    d: usize,
    a: Vec<f64>,
    cov: Vec<f64>,
}

impl From<ModelParams> for ModelParamsRepr {
    fn from(p: ModelParams) -> Self {
        ModelParamsRepr { d: p.d, a: p.a, cov: p.cov }
    }
}

impl TryFrom<ModelParamsRepr> for ModelParams {
    type Error = ModelError;

    fn try_from(repr: ModelParamsRepr) -> Result<Self, Self::Error> {
        if repr.d < 2 {
            return Err(ModelError::InvalidParams(format!(
                "need d >= 2, got {}",
                repr.d
            )));
        }
        ModelParams::from_raw(repr.d, repr.a, repr.cov)
    }
}

impl ModelParams {
    /// Length of the covariance parameter block for a given d: k(k+1)/2
    /// with k = d−1.
    pub fn cov_len(d: usize) -> usize {
        let k = d - 1;
        k * (k + 1) / 2
    }

    /// Zero tastes and ΔΣ = identity.
    pub fn neutral(d: usize, p: usize) -> Self {
        let k = d - 1;
        let mut cov = vec![0.0; Self::cov_len(d)];
        for raw in cov.iter_mut().take(k) {
            *raw = softplus_inv(1.0);
        }
        ModelParams { d, a: vec![0.0; p], cov }
    }

    pub fn from_raw(d: usize, a: Vec<f64>, cov: Vec<f64>) -> Result<Self, ModelError> {
        if cov.len() != Self::cov_len(d) {
            return Err(ModelError::InvalidParams(format!(
                "covariance block has {} entries, expected {}",
                cov.len(),
                Self::cov_len(d)
            )));
        }
        if a.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidParams("non-finite parameter".into()));
        }
        Ok(ModelParams { d, a, cov })
    }

    /// Parameterize a given PD covariance (taking its Cholesky factor and
    /// inverting the softplus on the diagonal).
    pub fn from_covariance(d: usize, a: Vec<f64>, dsigma: &Matrix) -> Result<Self, ModelError> {
        let k = d - 1;
        if dsigma.rows() != k || dsigma.cols() != k {
            return Err(ModelError::InvalidParams(format!(
                "covariance is {}x{}, expected {k}x{k}",
                dsigma.rows(),
                dsigma.cols()
            )));
        }
        let g = dsigma.cholesky()?;
        let mut cov = vec![0.0; Self::cov_len(d)];
        for i in 0..k {
            cov[i] = softplus_inv(g.get(i, i));
        }
        let mut idx = k;
        for i in 1..k {
            for j in 0..i {
                cov[idx] = g.get(i, j);
                idx += 1;
            }
        }
        Ok(ModelParams { d, a, cov })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.d - 1
    }

    pub fn p(&self) -> usize {
        self.a.len()
    }

    /// The raw covariance parameter block.
    pub fn cov_param(&self) -> &[f64] {
        &self.cov
    }

    pub fn cov_param_mut(&mut self) -> &mut [f64] {
        &mut self.cov
    }

    /// The Cholesky factor G (softplus applied to the stored diagonal).
    pub fn chol_factor(&self) -> Matrix {
        let k = self.k();
        let mut g = Matrix::zeros(k, k);
        for i in 0..k {
            g.set(i, i, softplus(self.cov[i]));
        }
        let mut idx = k;
        for i in 1..k {
            for j in 0..i {
                g.set(i, j, self.cov[idx]);
                idx += 1;
            }
        }
        g
    }

    /// ΔΣ = G·Gᵀ (positive definite by construction).
    pub fn delta_sigma(&self) -> Matrix {
        let g = self.chol_factor();
        g.matmul_transpose_b(&g)
    }

    /// The identified, trace-normalized ΔΣ̄.
    pub fn delta_sigma_bar(&self) -> Matrix {
        trace_normalize(&self.delta_sigma()).expect("GGᵀ has positive trace")
    }

    /// The identified representative of this model: rescaling utilities by
    /// any c > 0 leaves choices unchanged, so `(a, ΔΣ)` and `(c·a, c²·ΔΣ)`
    /// describe the same behavior. Pinning the covariance trace at d−1
    /// selects c = √((d−1)/tr ΔΣ), which must rescale the tastes *jointly*
    /// with the covariance — the pair `(a, ΔΣ̄)` with the original `a` would
    /// be a different model.
    pub fn identified_params(&self) -> ModelParams {
        let dsigma = self.delta_sigma();
        let c = (self.k() as f64 / dsigma.trace()).sqrt();
        let a = self.a.iter().map(|v| c * v).collect();
        let bar = trace_normalize(&dsigma).expect("GGᵀ has positive trace");
        ModelParams::from_covariance(self.d, a, &bar)
            .expect("a trace-normalized PD matrix stays PD")
    }

    /// Flat parameter view `[a | cov]` for metrics: the identified taste
    /// entries followed by the lower triangle (diagonal included,
    /// row-major) of ΔΣ̄.
    pub fn identified_vector(&self) -> Vec<f64> {
        let dsigma = self.delta_sigma();
        let c = (self.k() as f64 / dsigma.trace()).sqrt();
        let bar = trace_normalize(&dsigma).expect("GGᵀ has positive trace");
        let k = self.k();
        let mut out: Vec<f64> = self.a.iter().map(|v| c * v).collect();
        for i in 0..k {
            for j in 0..=i {
                out.push(bar.get(i, j));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngStream, StreamDomain};

    #[test]
    fn choose_full_space_examples() {
        let y = choose(&Utilities::Full(vec![0.2, 0.9, 0.1]), 0.0);
        assert_eq!(y, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn choose_differenced_baseline_when_all_negative() {
        let y = choose(&Utilities::Differenced(vec![-0.3, -0.1]), 0.0);
        assert_eq!(y, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn choose_differenced_positive_max() {
        let y = choose(&Utilities::Differenced(vec![0.5, -0.2]), 0.0);
        assert_eq!(y, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn choose_breaks_ties_by_lowest_index() {
        let y = choose(&Utilities::Full(vec![1.0, 1.0, 0.0]), 0.0);
        assert_eq!(y, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn choice_invariant_under_differencing_and_shifts() {
        let mut rng = RngStream::keyed(21, StreamDomain::Test, 0, 0);
        let c3 = DifferenceOperator::new(3);
        for _ in 0..2000 {
            let u: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
            let full = choose_index(&Utilities::Full(u.clone()), 0.0);
            let diff = choose_index(&Utilities::Differenced(c3.apply_vec(&u)), 0.0);
            assert_eq!(full, diff);
            let shift = rng.standard_normal();
            let shifted: Vec<f64> = u.iter().map(|x| x + shift).collect();
            assert_eq!(full, choose_index(&Utilities::Full(shifted), 0.0));
        }
    }

    #[test]
    fn difference_design_matches_dense_operator() {
        let mut rng = RngStream::keyed(22, StreamDomain::Test, 0, 0);
        for d in [2usize, 3, 5] {
            let p = d + 1;
            let mut x = Matrix::zeros(d, p);
            for i in 0..d {
                for j in 0..p {
                    x.set(i, j, rng.standard_normal());
                }
            }
            let fast = difference_design(&x);
            let dense = DifferenceOperator::new(d).dense().matmul(&x);
            assert!(fast.max_abs_diff(&dense) < 1e-14);
        }
    }

    #[test]
    fn difference_design_identity() {
        let x = Matrix::identity(3);
        let dx = difference_design(&x);
        let want = Matrix::from_rows(&[&[-1.0, 1.0, 0.0], &[-1.0, 0.0, 1.0]]).unwrap();
        assert!(dx.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn difference_design_identical_rows_is_zero() {
        let x = Matrix::from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]).unwrap();
        let dx = difference_design(&x);
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn difference_gaussian_identity_example() {
        let (dmu, dsig) = difference_gaussian(&[1.0, 1.0, 1.0], &Matrix::identity(3));
        assert_eq!(dmu, vec![0.0, 0.0]);
        let want = Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap();
        assert!(dsig.max_abs_diff(&want) < 1e-15);

        let (dmu2, _) = difference_gaussian(&[0.0, 1.0, 2.0], &Matrix::identity(3));
        assert_eq!(dmu2, vec![1.0, 2.0]);
    }

    #[test]
    fn difference_gaussian_matches_monte_carlo() {
        // Oracle: sample u ~ N(μ, Σ), difference the draws, and compare
        // moments with the analytic (Δμ, ΔΣ).
        let mut rng = RngStream::keyed(23, StreamDomain::Test, 0, 0);
        let mu = [0.3, -0.2, 0.7];
        let sigma = {
            let mut g = Matrix::zeros(3, 3);
            for i in 0..3 {
                for j in 0..3 {
                    g.set(i, j, rng.standard_normal());
                }
            }
            let mut s = g.matmul_transpose_b(&g);
            for i in 0..3 {
                s.set(i, i, s.get(i, i) + 0.5);
            }
            s
        };
        let (dmu, dsig) = difference_gaussian(&mu, &sigma);
        let factor = sigma.cholesky().unwrap();
        let c = DifferenceOperator::new(3);
        let n = 200_000;
        let mut sums = [0.0f64; 2];
        let mut prods = [[0.0f64; 2]; 2];
        for _ in 0..n {
            let z = rng.normal_vec(3);
            let u = crate::matrix::mvn_sample(&mu, &factor, &z).unwrap();
            let du = c.apply_vec(&u);
            for i in 0..2 {
                sums[i] += du[i];
                for j in 0..2 {
                    prods[i][j] += du[i] * du[j];
                }
            }
        }
        let scale = dsig.trace();
        for i in 0..2 {
            let mean = sums[i] / n as f64;
            assert!((mean - dmu[i]).abs() < 0.03 * scale.sqrt(), "mean {i}");
            for j in 0..2 {
                let cov = prods[i][j] / n as f64 - (sums[i] / n as f64) * (sums[j] / n as f64);
                assert!((cov - dsig.get(i, j)).abs() < 0.05 * scale, "cov {i}{j}");
            }
        }
    }

    #[test]
    fn trace_normalize_examples() {
        let s = Matrix::identity(2).scale(3.0);
        let bar = trace_normalize(&s).unwrap();
        assert!(bar.max_abs_diff(&Matrix::identity(2)) < 1e-15);

        let paper = Matrix::from_rows(&[&[0.89, 0.31], &[0.31, 1.11]]).unwrap();
        let bar = trace_normalize(&paper).unwrap();
        assert!(bar.max_abs_diff(&paper) < 1e-15, "trace already 2.0");
    }

    #[test]
    fn trace_normalize_idempotent_and_preserves_correlation() {
        let mut rng = RngStream::keyed(24, StreamDomain::Test, 0, 0);
        for _ in 0..50 {
            let k = 2 + rng.below(4);
            let mut g = Matrix::zeros(k, k);
            for i in 0..k {
                for j in 0..k {
                    g.set(i, j, rng.standard_normal());
                }
            }
            let mut s = g.matmul_transpose_b(&g);
            for i in 0..k {
                s.set(i, i, s.get(i, i) + 0.2);
            }
            let once = trace_normalize(&s).unwrap();
            let twice = trace_normalize(&once).unwrap();
            assert!(once.max_abs_diff(&twice) < 1e-12);
            assert!((once.trace() - k as f64).abs() < 1e-12);
            for i in 0..k {
                for j in 0..k {
                    let corr_in = s.get(i, j) / (s.get(i, i) * s.get(j, j)).sqrt();
                    let corr_out = once.get(i, j) / (once.get(i, i) * once.get(j, j)).sqrt();
                    assert!((corr_in - corr_out).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn trace_normalize_rejects_nonpositive_trace() {
        let s = Matrix::identity(2).scale(-1.0);
        assert!(matches!(trace_normalize(&s), Err(ModelError::NonPositiveTrace(_))));
    }

    #[test]
    fn model_params_covariance_roundtrip() {
        let target = Matrix::from_rows(&[&[0.89, 0.31], &[0.31, 1.11]]).unwrap();
        let params =
            ModelParams::from_covariance(3, vec![0.6, 0.55, 0.9, -0.25, 0.2], &target).unwrap();
        assert!(params.delta_sigma().max_abs_diff(&target) < 1e-12);
        assert!((params.delta_sigma_bar().trace() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn model_params_pd_under_random_raw_values() {
        let mut rng = RngStream::keyed(25, StreamDomain::Test, 0, 0);
        for d in [2usize, 3, 6, 11] {
            for _ in 0..200 {
                let cov: Vec<f64> = (0..ModelParams::cov_len(d))
                    .map(|_| 1.5 * rng.standard_normal())
                    .collect();
                let params = ModelParams::from_raw(d, vec![0.0; 2], cov).unwrap();
                // PD ⇔ Cholesky succeeds on the reconstruction.
                assert!(params.delta_sigma().cholesky().is_ok(), "d={d}");
            }
            // At extreme raw values softplus can underflow enough that the
            // reconstruction is numerically singular, but the factor diagonal
            // (the actual structural guarantee) stays strictly positive.
            for _ in 0..200 {
                let cov: Vec<f64> = (0..ModelParams::cov_len(d))
                    .map(|_| 6.0 * rng.standard_normal())
                    .collect();
                let params = ModelParams::from_raw(d, vec![0.0; 2], cov).unwrap();
                let g = params.chol_factor();
                for i in 0..params.k() {
                    assert!(g.get(i, i) > 0.0, "d={d}: factor diagonal must stay positive");
                }
            }
        }
    }

    #[test]
    fn identified_vector_layout() {
        let params = ModelParams::neutral(3, 2);
        let v = params.identified_vector();
        // a (2 entries) then lower triangle of the identity: 1, 0, 1.
        assert_eq!(v, vec![0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn identified_vector_is_invariant_under_joint_rescaling() {
        let dsigma = Matrix::from_rows(&[&[0.89, 0.31], &[0.31, 1.11]]).unwrap();
        let a = vec![0.6, 0.55, 0.9, -0.25, 0.2];
        let base = ModelParams::from_covariance(3, a.clone(), &dsigma).unwrap();
        for c in [0.25, 0.5, 2.0, 7.5] {
            let scaled_a: Vec<f64> = a.iter().map(|v| c * v).collect();
            let mut scaled_cov = dsigma.clone();
            for v in scaled_cov.as_mut_slice() {
                *v *= c * c;
            }
            let scaled = ModelParams::from_covariance(3, scaled_a, &scaled_cov).unwrap();
            for (lhs, rhs) in scaled.identified_vector().iter().zip(base.identified_vector()) {
                assert!(
                    (lhs - rhs).abs() < 1e-10,
                    "joint utility rescaling by {c} must not move the identified vector"
                );
            }
        }
    }

    #[test]
    fn identified_params_rescales_tastes_with_the_covariance() {
        // Trace 8 = 4·(d−1), so the identified scale factor is 1/2.
        let dsigma = Matrix::from_rows(&[&[4.0, 0.0], &[0.0, 4.0]]).unwrap();
        let params = ModelParams::from_covariance(3, vec![1.0, -2.0], &dsigma).unwrap();
        let ident = params.identified_params();
        assert!((ident.a[0] - 0.5).abs() < 1e-12);
        assert!((ident.a[1] + 1.0).abs() < 1e-12);
        assert!((ident.delta_sigma().trace() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn identified_params_is_idempotent() {
        let dsigma = Matrix::from_rows(&[&[1.3, -0.2], &[-0.2, 0.9]]).unwrap();
        let params = ModelParams::from_covariance(3, vec![0.4, 0.7], &dsigma).unwrap();
        let once = params.identified_params();
        let twice = once.identified_params();
        for (lhs, rhs) in once.identified_vector().iter().zip(twice.identified_vector()) {
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
