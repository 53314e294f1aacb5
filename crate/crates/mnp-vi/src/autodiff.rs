//! Reverse-mode gradient engine over a fixed set of primitives.
//!
//! The loss graph of this model is small and known in advance, so instead of
//! a general-purpose tape for arbitrary code, this module registers exactly
//! the primitives the loss needs — affine maps, softplus/log/exp, matrix
//! products, triangular reconstruction, log-determinant, PD inverse,
//! quadratic forms, and a fused Monte-Carlo reconstruction term — each with
//! a hand-derived adjoint rule that is finite-difference checked in the test
//! suite.
//!
//! A [`Tape`] is built fresh for every evaluation: callers register
//! parameter [`Tape::input`]s at offsets into a flat [`ParamVector`], build
//! the graph through the op methods, and call [`Tape::gradient`] on the
//! scalar root. Every forward op validates that its output is finite and
//! reports the offending primitive by name if not.

use thiserror::Error;

use crate::matrix::{Matrix, MatrixError};
use crate::model::{sigmoid, ModelParams};
use crate::surrogate::{decode, SurrogateScheme};

/// Probabilities are clamped below at this floor before the reconstruction
/// log, keeping the loss value finite while the backward pass stays on the
/// smooth surrogate path.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("non-finite value produced by primitive `{op}`")]
    NonFinite { op: &'static str },
    #[error("factorization failed in primitive `{op}`: {source}")]
    Factorization {
        op: &'static str,
        #[source]
        source: MatrixError,
    },
    #[error("non-finite gradient entry at parameter index {index}")]
    NonFiniteGradient { index: usize },
    #[error("parameter vector has {got} entries, layout expects {want}")]
    LayoutMismatch { got: usize, want: usize },
    #[error("non-finite parameter at index {0}")]
    NonFiniteParam(usize),
}

/// Offsets of the named segments inside the flat parameter vector
/// `[ξ | a | covariance block]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    /// Flat length of the encoder weight segment ξ.
    pub xi_len: usize,
    /// Number of taste coefficients.
    pub p: usize,
    /// Number of alternatives (fixes the covariance block length).
    pub d: usize,
}

impl ParamLayout {
    pub fn cov_len(&self) -> usize {
        let k = self.d.saturating_sub(1);
        k * (k + 1) / 2
    }

    pub fn total(&self) -> usize {
        self.xi_len + self.p + self.cov_len()
    }

    pub fn xi_range(&self) -> std::ops::Range<usize> {
        0..self.xi_len
    }

    pub fn a_range(&self) -> std::ops::Range<usize> {
        self.xi_len..self.xi_len + self.p
    }

    pub fn cov_range(&self) -> std::ops::Range<usize> {
        self.xi_len + self.p..self.total()
    }

    /// Named segments in storage order (for per-segment reporting).
    pub fn segments(&self) -> [(&'static str, std::ops::Range<usize>); 3] {
        [
            ("xi", self.xi_range()),
            ("a", self.a_range()),
            ("cov", self.cov_range()),
        ]
    }
}

/// The flat optimization vector ν = [ξ | a | cov].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: ParamLayout,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: ParamLayout, values: Vec<f64>) -> Result<Self, AdError> {
        if values.len() != layout.total() {
            return Err(AdError::LayoutMismatch { got: values.len(), want: layout.total() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(AdError::NonFiniteParam(i));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn from_parts(d: usize, xi: Vec<f64>, a: &[f64], cov: &[f64]) -> Result<Self, AdError> {
        let layout = ParamLayout { xi_len: xi.len(), p: a.len(), d };
        let mut values = xi;
        values.extend_from_slice(a);
        values.extend_from_slice(cov);
        ParamVector::new(layout, values)
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn xi(&self) -> &[f64] {
        &self.values[self.layout.xi_range()]
    }

    pub fn a(&self) -> &[f64] {
        &self.values[self.layout.a_range()]
    }

    pub fn cov(&self) -> &[f64] {
        &self.values[self.layout.cov_range()]
    }

    /// The model-parameter view (taste + covariance block).
    pub fn model_params(&self) -> ModelParams {
        ModelParams::from_raw(self.layout.d, self.a().to_vec(), self.cov().to_vec())
            .expect("layout-validated parameters are well formed")
    }
}

/// A gradient with the same layout as its [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    layout: ParamLayout,
    values: Vec<f64>,
}

impl GradVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        let n = layout.total();
        GradVector { layout, values: vec![0.0; n] }
    }

    pub fn new(layout: ParamLayout, values: Vec<f64>) -> Result<Self, AdError> {
        if values.len() != layout.total() {
            return Err(AdError::LayoutMismatch { got: values.len(), want: layout.total() });
        }
        Ok(GradVector { layout, values })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Accumulate `scale * other` into self (layouts must match).
    pub fn axpy(&mut self, scale: f64, other: &GradVector) {
        assert_eq!(self.layout, other.layout, "gradient layouts differ");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Noise and decode configuration for the fused Monte-Carlo reconstruction
/// op: L utility draws through the reparameterized encoder Gaussian, decoded
/// by the chosen surrogate, averaged into a single cross-entropy scalar.
#[derive(Debug, Clone)]
pub struct L1McSpec {
    /// 0-based observed alternative.
    pub y_idx: usize,
    pub scheme: SurrogateScheme,
    pub beta: f64,
    /// Number of utility draws L.
    pub count: usize,
    /// Standard-normal draws, `count × d` row-major per draw.
    pub z: Vec<f64>,
    /// Gumbel(0,1) draws, same shape; may be empty for STE.
    pub gumbel: Vec<f64>,
}

struct L1McState {
    spec: L1McSpec,
    /// Smooth decode outputs per draw (`count × d`), stored by the forward
    /// pass for the backward contraction.
    soft: Vec<f64>,
    /// Per-draw chain weight for the log's slope: differentiating
    /// −log(clamp(ŷ_y)) evaluates the slope at the forward value, so a draw
    /// contributes soft_y/ŷ_y — 1 for the smooth scheme, soft_y for a hard
    /// forward that reproduced the choice — and the clamp zeroes the slope
    /// for a draw whose forward probability sat at the floor.
    weights: Vec<f64>,
    /// √D cached at forward time.
    sqrt_d: Vec<f64>,
    beta_eff: f64,
}

enum Op {
    Input { offset: usize },
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    ScaleConst(Var, f64),
    /// (1×1 scalar node) × matrix node.
    ScalarMul(Var, Var),
    /// Elementwise reciprocal.
    Recip(Var),
    MatMul(Var, Var),
    /// A·Bᵀ.
    MatMulTB(Var, Var),
    /// Matrix plus a column vector broadcast across columns.
    AddColBroadcast(Var, Var),
    /// Column j as a column vector.
    ColSlice(Var, usize),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Hadamard(Var, Var),
    /// Row differencing: out[i] = in[i+1] − in[0] (applies the difference
    /// operator C on the left in O(d·cols)).
    DiffRows(Var),
    /// Scale column j by v[j].
    ColScaleVec(Var, Var),
    /// Unit lower-triangular d×d from its strict-lower entries (row-major).
    UnitLowerTri { strict: Var, dim: usize },
    /// Lower-triangular k×k from diagonal and strict-lower entries.
    BuildLowerTri { diag: Var, strict: Var },
    Trace(Var),
    /// Inner product of two equal-length column vectors.
    Dot(Var, Var),
    /// Frobenius inner product ΣΣ A∘B.
    FrobDot(Var, Var),
    /// Σ cᵢ·xᵢ + constant over 1×1 nodes (the constant influences only the
    /// forward value, so it is not stored).
    AffineCombine { terms: Vec<(f64, Var)> },
    /// log det of a PD matrix; the inverse is cached for the adjoint.
    LogDetPd { x: Var, inv: Matrix },
    /// PD inverse via Cholesky.
    InvPd(Var),
    /// Fused Monte-Carlo reconstruction term.
    L1Mc { mu: Var, l: Var, dvec: Var, state: Box<L1McState> },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// A single-use computation graph. Build inputs and ops, then call
/// [`Tape::gradient`] on a scalar root.
pub struct Tape {
    nodes: Vec<Node>,
    clamp_count: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), clamp_count: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of probability-floor clamps hit by fused reconstruction ops
    /// on this tape (a training diagnostic).
    pub fn clamp_count(&self) -> usize {
        self.clamp_count
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// The value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!((m.rows(), m.cols()), (1, 1), "scalar() needs a 1x1 node");
        m.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, name: &'static str) -> Result<Var, AdError> {
        if value.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].value.rows(), self.nodes[v.0].value.cols())
    }

    /// Register a `rows × cols` parameter block read row-major from
    /// `flat[offset..]`. Gradient entries flow back to the same range.
    pub fn input(
        &mut self,
        rows: usize,
        cols: usize,
        flat: &[f64],
        offset: usize,
    ) -> Result<Var, AdError> {
        let len = rows * cols;
        assert!(
            offset + len <= flat.len(),
            "input block [{offset}, {}) exceeds parameter length {}",
            offset + len,
            flat.len()
        );
        let value = Matrix::from_vec(rows, cols, flat[offset..offset + len].to_vec())
            .map_err(|source| AdError::Factorization { op: "input", source })?;
        self.push(value, Op::Input { offset }, "input")
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var, AdError> {
        self.push(value, Op::Const, "const")
    }

    pub fn scalar_constant(&mut self, v: f64) -> Result<Var, AdError> {
        self.constant(Matrix::from_vec(1, 1, vec![v]).expect("1x1"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value);
        self.push(value, Op::Sub(a, b), "sub")
    }

    pub fn scale_const(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        let value = self.nodes[a.0].value.scale(c);
        self.push(value, Op::ScaleConst(a, c), "scale_const")
    }

    /// (1×1 node) × matrix node.
    pub fn scalar_mul(&mut self, s: Var, m: Var) -> Result<Var, AdError> {
        assert_eq!(self.shape(s), (1, 1), "scalar_mul needs a 1x1 first operand");
        let value = self.nodes[m.0].value.scale(self.nodes[s.0].value.get(0, 0));
        self.push(value, Op::ScalarMul(s, m), "scalar_mul")
    }

    pub fn recip(&mut self, a: Var) -> Result<Var, AdError> {
        let mut value = self.nodes[a.0].value.clone();
        for v in value.as_mut_slice() {
            *v = 1.0 / *v;
        }
        self.push(value, Op::Recip(a), "recip")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    /// A·Bᵀ.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let value = self.nodes[a.0].value.matmul_transpose_b(&self.nodes[b.0].value);
        self.push(value, Op::MatMulTB(a, b), "matmul_tb")
    }

    /// `m + b·1ᵀ` for a column vector b (bias broadcast).
    pub fn add_col_broadcast(&mut self, m: Var, b: Var) -> Result<Var, AdError> {
        let (rows, _) = self.shape(m);
        assert_eq!(self.shape(b), (rows, 1), "broadcast vector must be rows×1");
        let mut value = self.nodes[m.0].value.clone();
        let bias = &self.nodes[b.0].value;
        for i in 0..rows {
            let bi = bias.get(i, 0);
            for v in value.row_mut(i) {
                *v += bi;
            }
        }
        self.push(value, Op::AddColBroadcast(m, b), "add_col_broadcast")
    }

    /// Column `j` of a matrix as a column vector.
    pub fn col_slice(&mut self, m: Var, j: usize) -> Result<Var, AdError> {
        let (rows, cols) = self.shape(m);
        assert!(j < cols, "column {j} out of range ({cols})");
        let value = Matrix::from_vec(rows, 1, self.nodes[m.0].value.col(j))
            .expect("column extraction preserves finiteness");
        self.push(value, Op::ColSlice(m, j), "col_slice")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, AdError> {
        let mut value = self.nodes[a.0].value.clone();
        for v in value.as_mut_slice() {
            *v = crate::model::softplus(*v);
        }
        self.push(value, Op::Softplus(a), "softplus")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AdError> {
        let mut value = self.nodes[a.0].value.clone();
        for v in value.as_mut_slice() {
            *v = v.exp();
        }
        self.push(value, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AdError> {
        let mut value = self.nodes[a.0].value.clone();
        for v in value.as_mut_slice() {
            *v = v.ln();
        }
        self.push(value, Op::Log(a), "log")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, AdError> {
        let mut value = self.nodes[a.0].value.clone();
        for v in value.as_mut_slice() {
            *v = v.sqrt();
        }
        self.push(value, Op::Sqrt(a), "sqrt")
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        assert_eq!(self.shape(a), self.shape(b), "hadamard shape mismatch");
        let mut value = self.nodes[a.0].value.clone();
        for (v, w) in value.as_mut_slice().iter_mut().zip(self.nodes[b.0].value.as_slice()) {
            *v *= w;
        }
        self.push(value, Op::Hadamard(a, b), "hadamard")
    }

    /// Apply the difference operator C on the left: out[i] = in[i+1] − in[0].
    pub fn diff_rows(&mut self, a: Var) -> Result<Var, AdError> {
        let (rows, cols) = self.shape(a);
        assert!(rows >= 2, "diff_rows needs at least two rows");
        let src = &self.nodes[a.0].value;
        let mut value = Matrix::zeros(rows - 1, cols);
        for i in 0..rows - 1 {
            for j in 0..cols {
                value.set(i, j, src.get(i + 1, j) - src.get(0, j));
            }
        }
        self.push(value, Op::DiffRows(a), "diff_rows")
    }

    /// Scale column j of `m` by `v[j]` (v a cols×1 vector).
    pub fn col_scale_vec(&mut self, m: Var, v: Var) -> Result<Var, AdError> {
        let (rows, cols) = self.shape(m);
        assert_eq!(self.shape(v), (cols, 1), "col_scale_vec wants a cols×1 vector");
        let scales = &self.nodes[v.0].value;
        let mut value = self.nodes[m.0].value.clone();
        for i in 0..rows {
            for (j, x) in value.row_mut(i).iter_mut().enumerate() {
                *x *= scales.get(j, 0);
            }
        }
        self.push(value, Op::ColScaleVec(m, v), "col_scale_vec")
    }

    /// Unit lower-triangular `dim × dim` matrix from strict-lower entries
    /// (row-major: (1,0), (2,0), (2,1), …).
    pub fn unit_lower_tri(&mut self, strict: Var, dim: usize) -> Result<Var, AdError> {
        let expect = dim * (dim - 1) / 2;
        assert_eq!(self.shape(strict), (expect, 1), "strict-lower entry count mismatch");
        let src = &self.nodes[strict.0].value;
        let mut value = Matrix::identity(dim);
        let mut idx = 0;
        for i in 1..dim {
            for j in 0..i {
                value.set(i, j, src.get(idx, 0));
                idx += 1;
            }
        }
        self.push(value, Op::UnitLowerTri { strict, dim }, "unit_lower_tri")
    }

    /// Lower-triangular k×k from a k×1 diagonal and strict-lower entries.
    pub fn build_lower_tri(&mut self, diag: Var, strict: Var) -> Result<Var, AdError> {
        let (k, one) = self.shape(diag);
        assert_eq!(one, 1, "diagonal must be k×1");
        let expect = k * (k - 1) / 2;
        assert_eq!(self.shape(strict).0 * self.shape(strict).1, expect, "strict entries mismatch");
        let dsrc = &self.nodes[diag.0].value;
        let ssrc = &self.nodes[strict.0].value;
        let mut value = Matrix::zeros(k, k);
        for i in 0..k {
            value.set(i, i, dsrc.get(i, 0));
        }
        let mut idx = 0;
        for i in 1..k {
            for j in 0..i {
                value.set(i, j, ssrc.as_slice()[idx]);
                idx += 1;
            }
        }
        self.push(value, Op::BuildLowerTri { diag, strict }, "build_lower_tri")
    }

    pub fn trace(&mut self, a: Var) -> Result<Var, AdError> {
        let (r, c) = self.shape(a);
        assert_eq!(r, c, "trace needs a square matrix");
        let value = Matrix::from_vec(1, 1, vec![self.nodes[a.0].value.trace()]).expect("1x1");
        self.push(value, Op::Trace(a), "trace")
    }

    /// Inner product of two equal-shape column vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        assert_eq!(self.shape(a), self.shape(b), "dot shape mismatch");
        assert_eq!(self.shape(a).1, 1, "dot expects column vectors");
        let v = crate::matrix::dot(self.nodes[a.0].value.as_slice(), self.nodes[b.0].value.as_slice());
        let value = Matrix::from_vec(1, 1, vec![v]).expect("1x1");
        self.push(value, Op::Dot(a, b), "dot")
    }

    /// Frobenius inner product of two equal-shape matrices.
    pub fn frob_dot(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        assert_eq!(self.shape(a), self.shape(b), "frob_dot shape mismatch");
        let v = crate::matrix::dot(self.nodes[a.0].value.as_slice(), self.nodes[b.0].value.as_slice());
        let value = Matrix::from_vec(1, 1, vec![v]).expect("1x1");
        self.push(value, Op::FrobDot(a, b), "frob_dot")
    }

    /// Σᵢ cᵢ·xᵢ + constant over scalar nodes.
    pub fn affine_combine(
        &mut self,
        terms: Vec<(f64, Var)>,
        constant: f64,
    ) -> Result<Var, AdError> {
        let mut total = constant;
        for &(c, v) in &terms {
            assert_eq!(self.shape(v), (1, 1), "affine_combine needs scalar nodes");
            total += c * self.nodes[v.0].value.get(0, 0);
        }
        let value = Matrix::from_vec(1, 1, vec![total]).expect("1x1");
        self.push(value, Op::AffineCombine { terms }, "affine_combine")
    }

    /// log det of a symmetric PD node.
    pub fn logdet_pd(&mut self, x: Var) -> Result<Var, AdError> {
        let m = &self.nodes[x.0].value;
        let v = m
            .logdet_pd()
            .map_err(|source| AdError::Factorization { op: "logdet_pd", source })?;
        let inv = m
            .inverse_pd()
            .map_err(|source| AdError::Factorization { op: "logdet_pd", source })?;
        let value = Matrix::from_vec(1, 1, vec![v]).expect("1x1");
        self.push(value, Op::LogDetPd { x, inv }, "logdet_pd")
    }

    /// Inverse of a symmetric PD node.
    pub fn inv_pd(&mut self, x: Var) -> Result<Var, AdError> {
        let value = self.nodes[x.0]
            .value
            .inverse_pd()
            .map_err(|source| AdError::Factorization { op: "inv_pd", source })?;
        self.push(value, Op::InvPd(x), "inv_pd")
    }

    /// The fused Monte-Carlo reconstruction term
    /// −(1/L)·Σ_l yᵀ·log ỹ(u⁽ˡ⁾) with u⁽ˡ⁾ = μ + L·(√D ∘ z⁽ˡ⁾).
    ///
    /// The forward value uses the scheme's forward output (one-hot for the
    /// hard schemes) clamped at [`PROB_FLOOR`]; the backward pass linearizes
    /// the cross-entropy through the smooth surrogate, contributing
    /// (ỹ_soft − y)/β_eff per draw.
    pub fn l1_mc(&mut self, mu: Var, l: Var, dvec: Var, spec: L1McSpec) -> Result<Var, AdError> {
        let (d, one) = self.shape(mu);
        assert_eq!(one, 1, "mu must be d×1");
        assert_eq!(self.shape(l), (d, d), "L must be d×d");
        assert_eq!(self.shape(dvec), (d, 1), "D must be d×1");
        assert!(spec.y_idx < d, "observed alternative out of range");
        assert!(spec.count >= 1, "need at least one utility draw");
        assert_eq!(spec.z.len(), spec.count * d, "z draws must be count×d");
        if spec.scheme.uses_noise() {
            assert_eq!(spec.gumbel.len(), spec.count * d, "gumbel draws must be count×d");
        }
        assert!(spec.beta > 0.0, "temperature must be positive");

        let lmat = &self.nodes[l.0].value;
        let muv = &self.nodes[mu.0].value;
        let dv = &self.nodes[dvec.0].value;
        let sqrt_d: Vec<f64> = (0..d).map(|j| dv.get(j, 0).sqrt()).collect();

        let zero_noise = vec![0.0; d];
        let mut total = 0.0;
        let mut soft = Vec::with_capacity(spec.count * d);
        let mut weights = Vec::with_capacity(spec.count);
        let mut beta_eff = 1.0;
        let mut clamps = 0usize;
        let mut w = vec![0.0; d];
        let mut u = vec![0.0; d];
        for s in 0..spec.count {
            let z_s = &spec.z[s * d..(s + 1) * d];
            for j in 0..d {
                w[j] = sqrt_d[j] * z_s[j];
            }
            for i in 0..d {
                let mut acc = muv.get(i, 0);
                for (lij, wj) in lmat.row(i).iter().zip(&w) {
                    acc += lij * wj;
                }
                u[i] = acc;
            }
            let g_s = if spec.scheme.uses_noise() {
                &spec.gumbel[s * d..(s + 1) * d]
            } else {
                &zero_noise[..]
            };
            let dec = decode(&u, spec.scheme, spec.beta, g_s);
            beta_eff = dec.beta_eff;
            let p = dec.forward[spec.y_idx];
            if p < PROB_FLOOR {
                clamps += 1;
                weights.push(0.0);
            } else {
                weights.push(dec.soft[spec.y_idx] / p);
            }
            total -= p.max(PROB_FLOOR).ln();
            soft.extend_from_slice(&dec.soft);
        }
        total /= spec.count as f64;
        self.clamp_count += clamps;

        let state = Box::new(L1McState { spec, soft, weights, sqrt_d, beta_eff });
        let value = Matrix::from_vec(1, 1, vec![total]).expect("1x1");
        self.push(value, Op::L1Mc { mu, l, dvec, state }, "l1_mc")
    }

    /// Run the backward pass from a scalar root and return the gradient with
    /// respect to every registered input, assembled into a flat vector of
    /// length `grad_len` (entries land at each input's registered offset).
    pub fn gradient(&self, root: Var, grad_len: usize) -> Result<Vec<f64>, AdError> {
        assert_eq!(self.shape(root), (1, 1), "gradient needs a scalar root");
        let n = self.nodes.len();
        let mut adjoints: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        adjoints[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).expect("1x1"));
        let mut out = vec![0.0; grad_len];

        // Nodes are appended in topological order, so a reverse index sweep
        // sees every consumer before its producer: when a node's slot is
        // taken, its adjoint is complete.
        for idx in (0..n).rev() {
            let Some(g) = adjoints[idx].take() else { continue };
            self.backward_step(idx, &g, &mut adjoints, &mut out);
        }

        if let Some(index) = out.iter().position(|v| !v.is_finite()) {
            return Err(AdError::NonFiniteGradient { index });
        }
        Ok(out)
    }

    fn backward_step(
        &self,
        idx: usize,
        g: &Matrix,
        adjoints: &mut [Option<Matrix>],
        out: &mut [f64],
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[idx].op {
            Op::Input { offset } => {
                for (k, &v) in g.as_slice().iter().enumerate() {
                    out[offset + k] += v;
                }
            }
            Op::Const => {}
            Op::Add(a, b) => {
                add_adjoint(adjoints, *a, g.clone());
                add_adjoint(adjoints, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_adjoint(adjoints, *a, g.clone());
                add_adjoint(adjoints, *b, g.scale(-1.0));
            }
            Op::ScaleConst(a, c) => {
                add_adjoint(adjoints, *a, g.scale(*c));
            }
            Op::ScalarMul(s, m) => {
                let sv = val(*s).get(0, 0);
                let s_bar = crate::matrix::dot(g.as_slice(), val(*m).as_slice());
                add_adjoint(adjoints, *s, Matrix::from_vec(1, 1, vec![s_bar]).expect("1x1"));
                add_adjoint(adjoints, *m, g.scale(sv));
            }
            Op::Recip(a) => {
                // y = 1/x ⇒ x̄ = −ḡ·y².
                let y = &self.nodes[idx].value;
                let mut contrib = g.clone();
                for (c, yv) in contrib.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *c *= -yv * yv;
                }
                add_adjoint(adjoints, *a, contrib);
            }
            Op::MatMul(a, b) => {
                add_adjoint(adjoints, *a, g.matmul_transpose_b(val(*b)));
                add_adjoint(adjoints, *b, val(*a).matmul_transpose_a(g));
            }
            Op::MatMulTB(a, b) => {
                // y = A·Bᵀ ⇒ Ā = ḡ·B, B̄ = ḡᵀ·A.
                add_adjoint(adjoints, *a, g.matmul(val(*b)));
                add_adjoint(adjoints, *b, g.matmul_transpose_a(val(*a)));
            }
            Op::AddColBroadcast(m, b) => {
                let mut row_sums = Matrix::zeros(g.rows(), 1);
                for i in 0..g.rows() {
                    row_sums.set(i, 0, g.row(i).iter().sum());
                }
                add_adjoint(adjoints, *m, g.clone());
                add_adjoint(adjoints, *b, row_sums);
            }
            Op::ColSlice(m, j) => {
                let (rows, cols) = (val(*m).rows(), val(*m).cols());
                let slot = adjoint_slot(adjoints, *m, rows, cols);
                for i in 0..rows {
                    slot.set(i, *j, slot.get(i, *j) + g.get(i, 0));
                }
            }
            Op::Softplus(a) => {
                let mut contrib = g.clone();
                for (c, &x) in contrib.as_mut_slice().iter_mut().zip(val(*a).as_slice()) {
                    *c *= sigmoid(x);
                }
                add_adjoint(adjoints, *a, contrib);
            }
            Op::Exp(a) => {
                let y = &self.nodes[idx].value;
                let mut contrib = g.clone();
                for (c, yv) in contrib.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *c *= yv;
                }
                add_adjoint(adjoints, *a, contrib);
            }
            Op::Log(a) => {
                let mut contrib = g.clone();
                for (c, &x) in contrib.as_mut_slice().iter_mut().zip(val(*a).as_slice()) {
                    *c /= x;
                }
                add_adjoint(adjoints, *a, contrib);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[idx].value;
                let mut contrib = g.clone();
                for (c, yv) in contrib.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *c *= 0.5 / yv;
                }
                add_adjoint(adjoints, *a, contrib);
            }
            Op::Hadamard(a, b) => {
                let mut ca = g.clone();
                for (c, w) in ca.as_mut_slice().iter_mut().zip(val(*b).as_slice()) {
                    *c *= w;
                }
                let mut cb = g.clone();
                for (c, w) in cb.as_mut_slice().iter_mut().zip(val(*a).as_slice()) {
                    *c *= w;
                }
                add_adjoint(adjoints, *a, ca);
                add_adjoint(adjoints, *b, cb);
            }
            Op::DiffRows(a) => {
                // out[i] = in[i+1] − in[0]: in̄[i+1] += ḡ[i]; in̄[0] −= Σᵢ ḡ[i].
                let (rows, cols) = (val(*a).rows(), val(*a).cols());
                let slot = adjoint_slot(adjoints, *a, rows, cols);
                for i in 0..rows - 1 {
                    for j in 0..cols {
                        let gij = g.get(i, j);
                        slot.set(i + 1, j, slot.get(i + 1, j) + gij);
                        slot.set(0, j, slot.get(0, j) - gij);
                    }
                }
            }
            Op::ColScaleVec(m, v) => {
                let (rows, cols) = (g.rows(), g.cols());
                let mv = val(*m);
                let vv = val(*v);
                let mut cm = g.clone();
                for i in 0..rows {
                    for (j, x) in cm.row_mut(i).iter_mut().enumerate() {
                        *x *= vv.get(j, 0);
                    }
                }
                let mut cv = Matrix::zeros(cols, 1);
                for j in 0..cols {
                    let mut acc = 0.0;
                    for i in 0..rows {
                        acc += g.get(i, j) * mv.get(i, j);
                    }
                    cv.set(j, 0, acc);
                }
                add_adjoint(adjoints, *m, cm);
                add_adjoint(adjoints, *v, cv);
            }
            Op::UnitLowerTri { strict, dim } => {
                let len = dim * (dim - 1) / 2;
                let slot = adjoint_slot(adjoints, *strict, len, 1);
                let mut idx_s = 0;
                for i in 1..*dim {
                    for j in 0..i {
                        slot.set(idx_s, 0, slot.get(idx_s, 0) + g.get(i, j));
                        idx_s += 1;
                    }
                }
            }
            Op::BuildLowerTri { diag, strict } => {
                let k = val(*diag).rows();
                {
                    let dslot = adjoint_slot(adjoints, *diag, k, 1);
                    for i in 0..k {
                        dslot.set(i, 0, dslot.get(i, 0) + g.get(i, i));
                    }
                }
                let (sr, sc) = (val(*strict).rows(), val(*strict).cols());
                let sslot = adjoint_slot(adjoints, *strict, sr, sc);
                let mut idx_s = 0;
                for i in 1..k {
                    for j in 0..i {
                        sslot.as_mut_slice()[idx_s] += g.get(i, j);
                        idx_s += 1;
                    }
                }
            }
            Op::Trace(a) => {
                let k = val(*a).rows();
                let g0 = g.get(0, 0);
                let slot = adjoint_slot(adjoints, *a, k, k);
                for i in 0..k {
                    slot.set(i, i, slot.get(i, i) + g0);
                }
            }
            Op::Dot(a, b) | Op::FrobDot(a, b) => {
                let g0 = g.get(0, 0);
                add_adjoint(adjoints, *a, val(*b).scale(g0));
                add_adjoint(adjoints, *b, val(*a).scale(g0));
            }
            Op::AffineCombine { terms, .. } => {
                let g0 = g.get(0, 0);
                for &(c, v) in terms {
                    add_adjoint(adjoints, v, Matrix::from_vec(1, 1, vec![c * g0]).expect("1x1"));
                }
            }
            Op::LogDetPd { x, inv } => {
                // d logdet S = tr(S⁻¹ dS) ⇒ S̄ = ḡ·S⁻¹ (the cached inverse
                // is already symmetric).
                add_adjoint(adjoints, *x, inv.scale(g.get(0, 0)));
            }
            Op::InvPd(x) => {
                // Y = S⁻¹ ⇒ S̄ = −Y·sym(Ḡ)·Y; symmetrizing the incoming
                // adjoint keeps the rule exact for arbitrary cotangents
                // (the forward symmetrizes its input the same way).
                let y = &self.nodes[idx].value;
                let gs = g.symmetrized();
                let contrib = y.matmul(&gs).matmul(y).scale(-1.0);
                add_adjoint(adjoints, *x, contrib);
            }
            Op::L1Mc { mu, l, dvec, state } => {
                self.backward_l1_mc(g.get(0, 0), *mu, *l, *dvec, state, adjoints);
            }
        }
    }

    fn backward_l1_mc(
        &self,
        g0: f64,
        mu: Var,
        l: Var,
        dvec: Var,
        state: &L1McState,
        adjoints: &mut [Option<Matrix>],
    ) {
        let d = self.nodes[mu.0].value.rows();
        let spec = &state.spec;
        let lmat = &self.nodes[l.0].value;
        let scale = g0 / (spec.count as f64 * state.beta_eff);

        let mut mu_bar = Matrix::zeros(d, 1);
        let mut l_bar = Matrix::zeros(d, d);
        let mut d_bar = Matrix::zeros(d, 1);
        let mut gl = vec![0.0; d];
        let mut w = vec![0.0; d];
        for s in 0..spec.count {
            let soft_s = &state.soft[s * d..(s + 1) * d];
            let z_s = &spec.z[s * d..(s + 1) * d];
            let w_s = state.weights[s];
            if w_s == 0.0 {
                continue;
            }
            // Cross-entropy gradient through the smooth path:
            // w_s·(ỹ_soft − y)/β_eff, scaled by ḡ/L. The per-draw weight
            // carries the log slope at the forward value (see L1McState).
            for j in 0..d {
                let y = if j == spec.y_idx { 1.0 } else { 0.0 };
                gl[j] = scale * w_s * (soft_s[j] - y);
            }
            for j in 0..d {
                w[j] = state.sqrt_d[j] * z_s[j];
            }
            // u = μ + L·w ⇒ μ̄ += gl; L̄ += gl·wᵀ; w̄ = Lᵀ·gl.
            for i in 0..d {
                mu_bar.set(i, 0, mu_bar.get(i, 0) + gl[i]);
                let li = l_bar.row_mut(i);
                for (lij, wj) in li.iter_mut().zip(&w) {
                    *lij += gl[i] * wj;
                }
            }
            for j in 0..d {
                let mut wbar_j = 0.0;
                for i in 0..d {
                    wbar_j += lmat.get(i, j) * gl[i];
                }
                // w_j = √D_j·z_j ⇒ D̄_j += w̄_j·z_j/(2√D_j).
                d_bar.set(j, 0, d_bar.get(j, 0) + wbar_j * z_s[j] * 0.5 / state.sqrt_d[j]);
            }
        }
        add_adjoint(adjoints, mu, mu_bar);
        add_adjoint(adjoints, l, l_bar);
        add_adjoint(adjoints, dvec, d_bar);
    }
}

/// Accumulate a contribution into a node's adjoint slot.
fn add_adjoint(adjoints: &mut [Option<Matrix>], v: Var, contribution: Matrix) {
    match &mut adjoints[v.0] {
        Some(m) => {
            debug_assert_eq!((m.rows(), m.cols()), (contribution.rows(), contribution.cols()));
            for (a, b) in m.as_mut_slice().iter_mut().zip(contribution.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Get a node's adjoint slot as a mutable matrix, creating zeros on demand.
fn adjoint_slot(adjoints: &mut [Option<Matrix>], v: Var, rows: usize, cols: usize) -> &mut Matrix {
    let slot = &mut adjoints[v.0];
    if slot.is_none() {
        *slot = Some(Matrix::zeros(rows, cols));
    }
    slot.as_mut().expect("just ensured")
}

/// Evaluate `f` at `at` and return (value, gradient). `f` receives a fresh
/// tape and must return the scalar root of the graph it built.
pub fn grad<F>(f: F, at: &ParamVector) -> Result<(f64, GradVector), AdError>
where
    F: Fn(&mut Tape, &ParamVector) -> Result<Var, AdError>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, at)?;
    let value = tape.scalar(root);
    let flat = tape.gradient(root, at.len())?;
    Ok((value, GradVector::new(*at.layout(), flat)?))
}

/// Forward-only evaluation of a tape-building function.
pub fn value_of<F>(f: F, at: &ParamVector) -> Result<f64, AdError>
where
    F: Fn(&mut Tape, &ParamVector) -> Result<Var, AdError>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, at)?;
    Ok(tape.scalar(root))
}

/// Worst finite-difference discrepancy within one named parameter segment.
#[derive(Debug, Clone)]
pub struct FdSegmentReport {
    pub segment: &'static str,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Finite-difference comparison report for a full parameter vector.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub step: f64,
    pub tol: f64,
    pub segments: Vec<FdSegmentReport>,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

impl FdReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "fd check (step {:.1e}, tol {:.1e}): max rel err {:.3e} at index {} [{}]",
            self.step,
            self.tol,
            self.max_rel_err,
            self.worst_index,
            if self.passes() { "pass" } else { "FAIL" }
        )?;
        for s in &self.segments {
            writeln!(
                f,
                "  segment {:>4}: max rel err {:.3e} at index {} (analytic {:.6e}, numeric {:.6e})",
                s.segment, s.max_rel_err, s.worst_index, s.analytic, s.numeric
            )?;
        }
        Ok(())
    }
}

/// Compare the reverse-mode gradient of `f` at `at` against central finite
/// differences. Relative error uses |analytic − numeric| / max(1, |numeric|),
/// reported per segment.
pub fn fd_check<F>(f: F, at: &ParamVector, step: f64, tol: f64) -> Result<FdReport, AdError>
where
    F: Fn(&mut Tape, &ParamVector) -> Result<Var, AdError>,
{
    assert!(step > 0.0, "fd step must be positive");
    let (_, analytic) = grad(&f, at)?;
    let mut segments = Vec::new();
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0usize;

    let mut point = at.clone();
    for (name, range) in at.layout().segments() {
        if range.is_empty() {
            continue;
        }
        let mut seg = FdSegmentReport {
            segment: name,
            max_rel_err: 0.0,
            worst_index: range.start,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in range {
            let saved = point.values()[i];
            point.values_mut()[i] = saved + step;
            let up = value_of(&f, &point)?;
            point.values_mut()[i] = saved - step;
            let down = value_of(&f, &point)?;
            point.values_mut()[i] = saved;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.values()[i];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > seg.max_rel_err {
                seg.max_rel_err = rel;
                seg.worst_index = i;
                seg.analytic = a;
                seg.numeric = numeric;
            }
        }
        if seg.max_rel_err > max_rel_err {
            max_rel_err = seg.max_rel_err;
            worst_index = seg.worst_index;
        }
        segments.push(seg);
    }

    Ok(FdReport { step, tol, segments, max_rel_err, worst_index })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngStream, StreamDomain};

    /// Check one tape-building function against central differences on a few
    /// random points. The layout is a bare xi segment of length `n`.
    fn fd_ok<F>(n: usize, key: u64, build: F)
    where
        F: Fn(&mut Tape, &ParamVector) -> Result<Var, AdError>,
    {
        let layout = ParamLayout { xi_len: n, p: 0, d: 0 };
        let mut rng = RngStream::keyed(41, StreamDomain::Test, key, 0);
        for trial in 0..3 {
            let values: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
            let at = ParamVector::new(layout, values).unwrap();
            let report = fd_check(&build, &at, 1e-5, 1e-6).unwrap();
            assert!(report.passes(), "trial {trial}:\n{report}");
        }
    }

    fn const_mat(tape: &mut Tape, rows: usize, cols: usize, key: u64) -> Var {
        let mut rng = RngStream::keyed(99, StreamDomain::Test, key, 0);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.standard_normal()).collect();
        tape.constant(Matrix::from_vec(rows, cols, data).unwrap()).unwrap()
    }

    #[test]
    fn square_example() {
        // f(x) = x² at x = 3 → value 9, gradient 6.
        let layout = ParamLayout { xi_len: 1, p: 0, d: 0 };
        let at = ParamVector::new(layout, vec![3.0]).unwrap();
        let (value, g) = grad(
            |tape, at| {
                let x = tape.input(1, 1, at.values(), 0)?;
                tape.hadamard(x, x)
            },
            &at,
        )
        .unwrap();
        assert_eq!(value, 9.0);
        assert_eq!(g.values(), &[6.0]);
    }

    #[test]
    fn softplus_example() {
        let layout = ParamLayout { xi_len: 1, p: 0, d: 0 };
        let at = ParamVector::new(layout, vec![0.0]).unwrap();
        let (value, g) = grad(
            |tape, at| {
                let x = tape.input(1, 1, at.values(), 0)?;
                tape.softplus(x)
            },
            &at,
        )
        .unwrap();
        assert!((value - 2.0f64.ln()).abs() < 1e-15);
        assert!((g.values()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quadratic_form_fd_is_nearly_exact() {
        // xᵀQx has an exact central difference; fd_check must agree to 1e-8.
        let build = |tape: &mut Tape, at: &ParamVector| {
            let x = tape.input(4, 1, at.values(), 0)?;
            let q = const_mat(tape, 4, 4, 1);
            let qx = tape.matmul(q, x)?;
            tape.dot(x, qx)
        };
        let layout = ParamLayout { xi_len: 4, p: 0, d: 0 };
        let mut rng = RngStream::keyed(41, StreamDomain::Test, 2, 0);
        let values: Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
        let at = ParamVector::new(layout, values).unwrap();
        let report = fd_check(build, &at, 1e-5, 1e-8).unwrap();
        assert!(report.passes(), "\n{report}");
    }

    #[test]
    fn fd_add_sub_scale() {
        fd_ok(8, 3, |tape, at| {
            let x1 = tape.input(2, 2, at.values(), 0)?;
            let x2 = tape.input(2, 2, at.values(), 4)?;
            let s = tape.sub(x2, x1)?;
            let sc = tape.scale_const(s, 2.5)?;
            let a = tape.add(x1, sc)?;
            let r = const_mat(tape, 2, 2, 3);
            tape.frob_dot(a, r)
        });
    }

    #[test]
    fn fd_matmul() {
        fd_ok(12, 4, |tape, at| {
            let a = tape.input(2, 3, at.values(), 0)?;
            let b = tape.input(3, 2, at.values(), 6)?;
            let m = tape.matmul(a, b)?;
            let r = const_mat(tape, 2, 2, 4);
            tape.frob_dot(m, r)
        });
    }

    #[test]
    fn fd_matmul_tb() {
        fd_ok(18, 5, |tape, at| {
            let a = tape.input(2, 3, at.values(), 0)?;
            let b = tape.input(4, 3, at.values(), 6)?;
            let m = tape.matmul_tb(a, b)?;
            let r = const_mat(tape, 2, 4, 5);
            tape.frob_dot(m, r)
        });
    }

    #[test]
    fn fd_add_col_broadcast() {
        fd_ok(15, 6, |tape, at| {
            let m = tape.input(3, 4, at.values(), 0)?;
            let b = tape.input(3, 1, at.values(), 12)?;
            let out = tape.add_col_broadcast(m, b)?;
            let r = const_mat(tape, 3, 4, 6);
            tape.frob_dot(out, r)
        });
    }

    #[test]
    fn fd_col_slice() {
        fd_ok(12, 7, |tape, at| {
            let m = tape.input(3, 4, at.values(), 0)?;
            let c = tape.col_slice(m, 2)?;
            let r = const_mat(tape, 3, 1, 7);
            tape.dot(c, r)
        });
    }

    #[test]
    fn fd_softplus() {
        fd_ok(6, 8, |tape, at| {
            let x = tape.input(2, 3, at.values(), 0)?;
            let y = tape.softplus(x)?;
            let r = const_mat(tape, 2, 3, 8);
            tape.frob_dot(y, r)
        });
    }

    #[test]
    fn fd_exp() {
        fd_ok(6, 9, |tape, at| {
            let x = tape.input(2, 3, at.values(), 0)?;
            let y = tape.exp(x)?;
            let r = const_mat(tape, 2, 3, 9);
            tape.frob_dot(y, r)
        });
    }

    #[test]
    fn fd_log_sqrt_recip_on_positive_chain() {
        fd_ok(4, 10, |tape, at| {
            let x = tape.input(4, 1, at.values(), 0)?;
            let sp = tape.softplus(x)?;
            let shift = tape.constant(Matrix::from_vec(4, 1, vec![0.3; 4]).unwrap())?;
            let pos = tape.add(sp, shift)?;
            let lg = tape.log(pos)?;
            let sq = tape.sqrt(pos)?;
            let rc = tape.recip(pos)?;
            let r1 = const_mat(tape, 4, 1, 10);
            let r2 = const_mat(tape, 4, 1, 11);
            let r3 = const_mat(tape, 4, 1, 12);
            let t1 = tape.dot(lg, r1)?;
            let t2 = tape.dot(sq, r2)?;
            let t3 = tape.dot(rc, r3)?;
            tape.affine_combine(vec![(1.0, t1), (0.7, t2), (-0.4, t3)], 0.0)
        });
    }

    #[test]
    fn fd_hadamard() {
        fd_ok(12, 13, |tape, at| {
            let a = tape.input(2, 3, at.values(), 0)?;
            let b = tape.input(2, 3, at.values(), 6)?;
            let h = tape.hadamard(a, b)?;
            let r = const_mat(tape, 2, 3, 13);
            tape.frob_dot(h, r)
        });
    }

    #[test]
    fn fd_scalar_mul() {
        fd_ok(5, 14, |tape, at| {
            let s = tape.input(1, 1, at.values(), 0)?;
            let m = tape.input(2, 2, at.values(), 1)?;
            let out = tape.scalar_mul(s, m)?;
            let r = const_mat(tape, 2, 2, 14);
            tape.frob_dot(out, r)
        });
    }

    #[test]
    fn fd_diff_rows() {
        fd_ok(12, 15, |tape, at| {
            let m = tape.input(4, 3, at.values(), 0)?;
            let d = tape.diff_rows(m)?;
            let r = const_mat(tape, 3, 3, 15);
            tape.frob_dot(d, r)
        });
    }

    #[test]
    fn fd_col_scale_vec() {
        fd_ok(16, 16, |tape, at| {
            let m = tape.input(3, 4, at.values(), 0)?;
            let v = tape.input(4, 1, at.values(), 12)?;
            let out = tape.col_scale_vec(m, v)?;
            let r = const_mat(tape, 3, 4, 16);
            tape.frob_dot(out, r)
        });
    }

    #[test]
    fn fd_unit_lower_tri() {
        fd_ok(6, 17, |tape, at| {
            let strict = tape.input(6, 1, at.values(), 0)?;
            let l = tape.unit_lower_tri(strict, 4)?;
            let r = const_mat(tape, 4, 4, 17);
            tape.frob_dot(l, r)
        });
    }

    #[test]
    fn fd_build_lower_tri() {
        fd_ok(6, 18, |tape, at| {
            let diag = tape.input(3, 1, at.values(), 0)?;
            let strict = tape.input(3, 1, at.values(), 3)?;
            let g = tape.build_lower_tri(diag, strict)?;
            let r = const_mat(tape, 3, 3, 18);
            tape.frob_dot(g, r)
        });
    }

    #[test]
    fn fd_trace_dot_frob_affine() {
        fd_ok(9, 19, |tape, at| {
            let m = tape.input(3, 3, at.values(), 0)?;
            let t = tape.trace(m)?;
            let r = const_mat(tape, 3, 3, 19);
            let f = tape.frob_dot(m, r)?;
            tape.affine_combine(vec![(1.5, t), (-0.5, f)], 2.0)
        });
    }

    #[test]
    fn fd_logdet_pd() {
        fd_ok(9, 20, |tape, at| {
            let a = tape.input(3, 3, at.values(), 0)?;
            let gram = tape.matmul_tb(a, a)?;
            let ridge = tape.constant(Matrix::identity(3).scale(1.5))?;
            let s = tape.add(gram, ridge)?;
            tape.logdet_pd(s)
        });
    }

    #[test]
    fn fd_inv_pd_with_asymmetric_cotangent() {
        fd_ok(9, 21, |tape, at| {
            let a = tape.input(3, 3, at.values(), 0)?;
            let gram = tape.matmul_tb(a, a)?;
            let ridge = tape.constant(Matrix::identity(3).scale(1.5))?;
            let s = tape.add(gram, ridge)?;
            let inv = tape.inv_pd(s)?;
            let r = const_mat(tape, 3, 3, 21);
            tape.frob_dot(inv, r)
        });
    }

    fn l1_spec(d: usize, count: usize, scheme: SurrogateScheme, beta: f64, key: u64) -> L1McSpec {
        let mut rng = RngStream::keyed(43, StreamDomain::Test, key, 0);
        let z: Vec<f64> = (0..count * d).map(|_| rng.standard_normal()).collect();
        let gumbel: Vec<f64> = (0..count * d).map(|_| rng.gumbel()).collect();
        L1McSpec { y_idx: 1, scheme, beta, count, z, gumbel }
    }

    fn build_l1<'a>(
        d: usize,
        spec: &'a L1McSpec,
    ) -> impl Fn(&mut Tape, &ParamVector) -> Result<Var, AdError> + 'a {
        move |tape: &mut Tape, at: &ParamVector| {
            let flat = at.values();
            let strict_len = d * (d - 1) / 2;
            let mu = tape.input(d, 1, flat, 0)?;
            let raw = tape.input(d, 1, flat, d)?;
            let strict = tape.input(strict_len, 1, flat, 2 * d)?;
            let dvec = tape.softplus(raw)?;
            let l = tape.unit_lower_tri(strict, d)?;
            tape.l1_mc(mu, l, dvec, spec.clone())
        }
    }

    #[test]
    fn fd_l1_mc_smooth_scheme() {
        let d = 3;
        let spec = l1_spec(d, 4, SurrogateScheme::GumbelSoftmax, 0.7, 1);
        fd_ok(2 * d + d * (d - 1) / 2, 22, build_l1(d, &spec));
    }

    #[test]
    fn l1_mc_hard_schemes_gate_the_smooth_backward() {
        // Differentiating −log(clamp(ŷ_y)) evaluates the log's slope at the
        // forward value: a hard scheme therefore scales the smooth-path
        // gradient by soft_y when its forward reproduces the choice, and a
        // clamped (misreproducing) draw contributes no gradient at all. The
        // smooth scheme's slope 1/soft_y cancels that factor, recovering
        // the textbook cross-entropy gradient.
        let d = 4;
        let n = 2 * d + d * (d - 1) / 2;
        let layout = ParamLayout { xi_len: n, p: 0, d: 0 };
        let mut rng = RngStream::keyed(44, StreamDomain::Test, 0, 0);
        let mut correct = 0usize;
        let mut wrong = 0usize;
        for trial in 0..40 {
            let values: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
            let at = ParamVector::new(layout, values).unwrap();

            // Single draw so the per-draw relation is exact.
            let comb = l1_spec(d, 1, SurrogateScheme::Combined, 0.4, 100 + trial as u64);
            let mut soft = comb.clone();
            soft.scheme = SurrogateScheme::GumbelSoftmax;
            let (v_comb, g_comb) = grad(build_l1(d, &comb), &at).unwrap();
            let (v_soft, g_soft) = grad(build_l1(d, &soft), &at).unwrap();
            if v_comb == 0.0 {
                // Forward correct: −ln 1 = 0 and the gate is soft_y = e^{−v_soft}.
                correct += 1;
                let soft_y = (-v_soft).exp();
                if soft_y <= PROB_FLOOR {
                    // The smooth scheme's own floor zeroed its slope while
                    // the hard-correct draw keeps its (vanishing) gradient.
                    assert!(g_soft.values().iter().all(|g| *g == 0.0));
                    assert!(g_comb.values().iter().all(|g| g.abs() < 1e-10));
                    continue;
                }
                for (a, b) in g_comb.values().iter().zip(g_soft.values()) {
                    assert!(
                        (a - soft_y * b).abs() < 1e-12,
                        "correct-forward combined gradient must be soft_y times the smooth one"
                    );
                }
            } else {
                // Forward wrong: the clamp floors the value and zeroes the slope.
                wrong += 1;
                assert!((v_comb - (-PROB_FLOOR.ln())).abs() < 1e-9);
                assert!(g_comb.values().iter().all(|g| *g == 0.0));
            }

            // STE relates to the zero-noise β=1 smooth backward the same
            // way (its smooth path is softmax(u), not softmax(u/β)).
            let mut ste = l1_spec(d, 1, SurrogateScheme::Ste, 0.7, 300 + trial as u64);
            ste.gumbel.clear();
            let mut plain = ste.clone();
            plain.scheme = SurrogateScheme::GumbelSoftmax;
            plain.beta = 1.0;
            plain.gumbel = vec![0.0; d];
            let (v_ste, g_ste) = grad(build_l1(d, &ste), &at).unwrap();
            let (v_plain, g_plain) = grad(build_l1(d, &plain), &at).unwrap();
            if v_ste == 0.0 {
                let soft_y = (-v_plain).exp();
                for (a, b) in g_ste.values().iter().zip(g_plain.values()) {
                    assert!((a - soft_y * b).abs() < 1e-12);
                }
            } else {
                assert!(g_ste.values().iter().all(|g| *g == 0.0));
            }
        }
        assert!(correct > 0 && wrong > 0, "trials must exercise both gate branches");
    }

    #[test]
    fn l1_mc_perfect_reconstruction_is_zero() {
        let d = 3;
        let n = 2 * d + d * (d - 1) / 2;
        let layout = ParamLayout { xi_len: n, p: 0, d: 0 };
        // Mean strongly favors the observed alternative; tiny variance.
        let mut values = vec![0.0; n];
        values[0] = -30.0;
        values[1] = 30.0; // y_idx = 1
        values[2] = -30.0;
        for v in values.iter_mut().take(2 * d).skip(d) {
            *v = -20.0; // softplus(−20) ≈ 2e-9 variance
        }
        let at = ParamVector::new(layout, values).unwrap();
        let mut spec = l1_spec(d, 8, SurrogateScheme::Ste, 1.0, 2);
        spec.gumbel.clear();
        let value = value_of(build_l1(d, &spec), &at).unwrap();
        assert_eq!(value, 0.0, "argmax always hits the observed class: −ln 1 = 0");
    }

    #[test]
    fn l1_mc_counts_probability_clamps() {
        let d = 3;
        let n = 2 * d + d * (d - 1) / 2;
        // Mean points away from the observed class, so the hard forward
        // output is a wrong vertex every draw: probability 0, clamped.
        let mut values = vec![0.0; n];
        values[0] = 30.0;
        values[1] = -30.0;
        values[2] = -30.0;
        for v in values.iter_mut().take(2 * d).skip(d) {
            *v = -20.0;
        }
        let count = 8;
        let mut spec = l1_spec(d, count, SurrogateScheme::Ste, 1.0, 3);
        spec.gumbel.clear();
        let mut tape = Tape::new();
        let root = {
            let build = build_l1(d, &spec);
            let layout = ParamLayout { xi_len: n, p: 0, d: 0 };
            let at = ParamVector::new(layout, values).unwrap();
            build(&mut tape, &at).unwrap()
        };
        assert_eq!(tape.clamp_count(), count);
        assert!((tape.scalar(root) - (-PROB_FLOOR.ln())).abs() < 1e-12);
    }

    #[test]
    fn logdet_gradient_equals_inverse() {
        let mut rng = RngStream::keyed(45, StreamDomain::Test, 0, 0);
        let mut a = Matrix::zeros(3, 3);
        for v in a.as_mut_slice() {
            *v = rng.standard_normal();
        }
        let mut s = a.matmul_transpose_b(&a);
        for i in 0..3 {
            s.set(i, i, s.get(i, i) + 0.8);
        }
        let layout = ParamLayout { xi_len: 9, p: 0, d: 0 };
        let at = ParamVector::new(layout, s.as_slice().to_vec()).unwrap();
        let (_, g) = grad(
            |tape, at| {
                let x = tape.input(3, 3, at.values(), 0)?;
                tape.logdet_pd(x)
            },
            &at,
        )
        .unwrap();
        let inv = s.inverse_pd().unwrap();
        for (gv, iv) in g.values().iter().zip(inv.as_slice()) {
            assert!((gv - iv).abs() < 1e-12, "∇ logdet S must equal S⁻¹");
        }
    }

    #[test]
    fn trace_normalize_composite_matches_direct_route() {
        let mut rng = RngStream::keyed(46, StreamDomain::Test, 0, 0);
        let mut a = Matrix::zeros(3, 3);
        for v in a.as_mut_slice() {
            *v = rng.standard_normal();
        }
        let layout = ParamLayout { xi_len: 9, p: 0, d: 0 };
        let at = ParamVector::new(layout, a.as_slice().to_vec()).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(3, 3, at.values(), 0).unwrap();
        let gram = tape.matmul_tb(x, x).unwrap();
        let ridge = tape.constant(Matrix::identity(3).scale(0.4)).unwrap();
        let s = tape.add(gram, ridge).unwrap();
        let t = tape.trace(s).unwrap();
        let it = tape.recip(t).unwrap();
        let scaled = tape.scalar_mul(it, s).unwrap();
        let bar = tape.scale_const(scaled, 3.0).unwrap();
        let direct = crate::model::trace_normalize(tape.value(s)).unwrap();
        assert!(tape.value(bar).max_abs_diff(&direct) < 1e-14);
    }

    #[test]
    fn gradient_is_deterministic() {
        let d = 3;
        let n = 2 * d + d * (d - 1) / 2;
        let layout = ParamLayout { xi_len: n, p: 0, d: 0 };
        let mut rng = RngStream::keyed(47, StreamDomain::Test, 0, 0);
        let values: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let at = ParamVector::new(layout, values).unwrap();
        let spec = l1_spec(d, 5, SurrogateScheme::Combined, 0.3, 4);
        let (v1, g1) = grad(build_l1(d, &spec), &at).unwrap();
        let (v2, g2) = grad(build_l1(d, &spec), &at).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(g1.values(), g2.values(), "identical builds must agree bit-for-bit");
    }

    #[test]
    fn non_finite_forward_names_the_primitive() {
        let layout = ParamLayout { xi_len: 2, p: 0, d: 0 };
        let at = ParamVector::new(layout, vec![-1.0, 2.0]).unwrap();
        let err = value_of(
            |tape, at| {
                let x = tape.input(2, 1, at.values(), 0)?;
                tape.log(x)
            },
            &at,
        )
        .unwrap_err();
        match err {
            AdError::NonFinite { op } => assert_eq!(op, "log"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn shared_input_accumulates_gradient() {
        let layout = ParamLayout { xi_len: 1, p: 0, d: 0 };
        let at = ParamVector::new(layout, vec![1.7]).unwrap();
        let (value, g) = grad(
            |tape, at| {
                let x = tape.input(1, 1, at.values(), 0)?;
                tape.add(x, x)
            },
            &at,
        )
        .unwrap();
        assert_eq!(value, 3.4);
        assert_eq!(g.values(), &[2.0]);
    }

    #[test]
    fn param_vector_views_and_layout() {
        let xi = vec![0.1, 0.2];
        let a = [0.5, -0.5, 1.5];
        let target = Matrix::from_rows(&[&[0.89, 0.31], &[0.31, 1.11]]).unwrap();
        let mp = crate::model::ModelParams::from_covariance(3, a.to_vec(), &target).unwrap();
        let pv = ParamVector::from_parts(3, xi.clone(), &a, mp.cov_param()).unwrap();
        assert_eq!(pv.xi(), &xi[..]);
        assert_eq!(pv.a(), &a[..]);
        assert_eq!(pv.cov(), mp.cov_param());
        assert_eq!(pv.layout().total(), 2 + 3 + 3);
        let back = pv.model_params();
        assert!(back.delta_sigma().max_abs_diff(&target) < 1e-12);
    }

    #[test]
    fn grad_vector_axpy_and_scale() {
        let layout = ParamLayout { xi_len: 2, p: 0, d: 0 };
        let mut g1 = GradVector::new(layout, vec![1.0, 2.0]).unwrap();
        let g2 = GradVector::new(layout, vec![10.0, -10.0]).unwrap();
        g1.axpy(0.5, &g2);
        assert_eq!(g1.values(), &[6.0, -3.0]);
        g1.scale_in_place(2.0);
        assert_eq!(g1.values(), &[12.0, -6.0]);
    }
}
