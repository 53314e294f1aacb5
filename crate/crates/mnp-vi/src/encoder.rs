//! Amortized variational encoder: a feed-forward network mapping each
//! observation's (choice, design) pair to a full-covariance Gaussian over
//! its latent utilities, parameterized through an LDLᵀ head so the
//! covariance is positive definite for any real network output.
//!
//! Weight layout (the ξ segment of the flat parameter vector) is fixed and
//! documented here: for each hidden layer in order, the weight matrix
//! (row-major) followed by its bias; then the mean head (W, b), the diagonal
//! head (W, b), and the strict-lower head (W, b). The network input is the
//! concatenation `[y one-hot (d) | vec(X) row-major (d·p)]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdError, Tape, Var};
use crate::matrix::Matrix;
use crate::model::{softplus, softplus_inv, ChoiceDataset, ModelError};
use crate::rng::RngStream;

/// The only activation currently offered; named so configurations stay
/// explicit about what they ran with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Softplus,
}

/// Network shape hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { hidden_layers: 2, hidden_width: 128, activation: Activation::Softplus }
    }
}

/// An encoder shape bound to a problem size (d alternatives, p covariates).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoder {
    d: usize,
    p: usize,
    config: EncoderConfig,
}

/// The per-observation variational Gaussian: mean, positive diagonal, and
/// unit lower-triangular factor, giving Σ_ξ = L·diag(D)·Lᵀ.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub mu: Vec<f64>,
    /// Positive diagonal entries (softplus already applied).
    pub dvec: Vec<f64>,
    /// Unit lower-triangular factor.
    pub l: Matrix,
}

impl EncoderOutput {
    pub fn d(&self) -> usize {
        self.mu.len()
    }

    /// Σ_ξ = L·diag(D)·Lᵀ (PD by construction).
    pub fn sigma(&self) -> Matrix {
        let d = self.d();
        let mut ld = self.l.clone();
        for i in 0..d {
            for (j, v) in ld.row_mut(i).iter_mut().enumerate() {
                *v *= self.dvec[j];
            }
        }
        ld.matmul_transpose_b(&self.l)
    }

    /// One reparameterized draw u = μ + L·(√D ∘ z).
    pub fn sample(&self, z: &[f64]) -> Vec<f64> {
        let d = self.d();
        assert_eq!(z.len(), d, "z must have length d");
        let w: Vec<f64> = (0..d).map(|j| self.dvec[j].sqrt() * z[j]).collect();
        let mut u = self.mu.clone();
        for i in 0..d {
            for (lij, wj) in self.l.row(i).iter().zip(&w) {
                u[i] += lij * wj;
            }
        }
        u
    }
}

/// Draw `count` reparameterized utility vectors from flat standard-normal
/// noise (`count × d`, row-major per draw).
pub fn sample_utilities(out: &EncoderOutput, z_flat: &[f64], count: usize) -> Vec<Vec<f64>> {
    let d = out.d();
    assert!(count >= 1, "need at least one draw");
    assert_eq!(z_flat.len(), count * d, "noise must be count×d");
    (0..count).map(|s| out.sample(&z_flat[s * d..(s + 1) * d])).collect()
}

/// Head node handles returned by the tape builder: each is a matrix whose
/// column i belongs to observation i of the chunk.
#[derive(Debug, Clone, Copy)]
pub struct EncoderHeads {
    /// d × m mean head.
    pub mu: Var,
    /// d × m positive diagonal head (softplus applied).
    pub dvec: Var,
    /// (d(d−1)/2) × m strict-lower head.
    pub lstrict: Var,
}

/// Unpacked weights for fast repeated standalone forwards.
pub struct EncoderWeights {
    layers: Vec<(Matrix, Vec<f64>)>,
    mu_head: (Matrix, Vec<f64>),
    d_head: (Matrix, Vec<f64>),
    l_head: (Matrix, Vec<f64>),
}

impl Encoder {
    pub fn new(d: usize, p: usize, config: EncoderConfig) -> Result<Self, ModelError> {
        if d < 2 {
            return Err(ModelError::InvalidParams(format!("encoder needs d >= 2, got {d}")));
        }
        if p < 1 {
            return Err(ModelError::InvalidParams("encoder needs p >= 1".into()));
        }
        if config.hidden_layers < 1 || config.hidden_width < 1 {
            return Err(ModelError::InvalidParams(
                "encoder needs at least one hidden layer of width >= 1".into(),
            ));
        }
        Ok(Encoder { d, p, config })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.d + self.d * self.p
    }

    pub fn strict_len(&self) -> usize {
        self.d * (self.d - 1) / 2
    }

    /// Weight matrices in layout order as (rows, cols); every matrix is
    /// followed in the flat vector by its rows×1 bias.
    fn matrix_dims(&self) -> Vec<(usize, usize)> {
        let w = self.config.hidden_width;
        let mut dims = Vec::with_capacity(self.config.hidden_layers + 3);
        dims.push((w, self.input_dim()));
        for _ in 1..self.config.hidden_layers {
            dims.push((w, w));
        }
        dims.push((self.d, w)); // mean head
        dims.push((self.d, w)); // diagonal head
        dims.push((self.strict_len(), w)); // strict-lower head
        dims
    }

    /// Index of the diagonal head inside [`Self::matrix_dims`].
    fn d_head_index(&self) -> usize {
        self.config.hidden_layers + 1
    }

    pub fn xi_len(&self) -> usize {
        self.matrix_dims().iter().map(|(r, c)| r * (c + 1)).sum()
    }

    /// Glorot-uniform weights (±√(6/(fan_in+fan_out))), zero biases except
    /// the diagonal head's, which starts at softplus⁻¹(1) so the initial
    /// variational covariance is near the identity.
    ///
    /// Draw order: matrices in layout order; each matrix row-major, then its
    /// bias (no draws are consumed for biases).
    pub fn init_weights(&self, rng: &mut RngStream) -> Vec<f64> {
        let mut xi = Vec::with_capacity(self.xi_len());
        for (idx, (rows, cols)) in self.matrix_dims().into_iter().enumerate() {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            for _ in 0..rows * cols {
                xi.push(rng.uniform_in(-limit, limit));
            }
            let bias = if idx == self.d_head_index() { softplus_inv(1.0) } else { 0.0 };
            xi.extend(std::iter::repeat(bias).take(rows));
        }
        xi
    }

    /// The fixed input layout: `[y one-hot | vec(X) row-major]`.
    pub fn input_column(&self, y_onehot: &[f64], x_flat: &[f64]) -> Vec<f64> {
        assert_eq!(y_onehot.len(), self.d, "one-hot length mismatch");
        assert_eq!(x_flat.len(), self.d * self.p, "design length mismatch");
        let mut col = Vec::with_capacity(self.input_dim());
        col.extend_from_slice(y_onehot);
        col.extend_from_slice(x_flat);
        col
    }

    /// Stack the input columns of the given observations into an
    /// `input_dim × m` matrix (column i ↔ indices[i]).
    pub fn input_columns(&self, data: &ChoiceDataset, indices: &[usize]) -> Matrix {
        assert_eq!(data.d(), self.d);
        assert_eq!(data.p(), self.p);
        let m = indices.len();
        let mut out = Matrix::zeros(self.input_dim(), m);
        for (c, &i) in indices.iter().enumerate() {
            out.set(data.choice(i), c, 1.0);
            let x = data.design_slice(i);
            for (r, &v) in x.iter().enumerate() {
                out.set(self.d + r, c, v);
            }
        }
        out
    }

    /// Materialize weight matrices from the flat ξ segment.
    pub fn unpack(&self, xi: &[f64]) -> EncoderWeights {
        assert_eq!(xi.len(), self.xi_len(), "ξ length mismatch");
        let dims = self.matrix_dims();
        let mut offset = 0;
        let mut take = |rows: usize, cols: usize| {
            let w = Matrix::from_vec(rows, cols, xi[offset..offset + rows * cols].to_vec())
                .expect("validated weights");
            offset += rows * cols;
            let b = xi[offset..offset + rows].to_vec();
            offset += rows;
            (w, b)
        };
        let hidden = self.config.hidden_layers;
        let mut layers = Vec::with_capacity(hidden);
        for &(r, c) in dims.iter().take(hidden) {
            layers.push(take(r, c));
        }
        let mu_head = take(dims[hidden].0, dims[hidden].1);
        let d_head = take(dims[hidden + 1].0, dims[hidden + 1].1);
        let l_head = take(dims[hidden + 2].0, dims[hidden + 2].1);
        EncoderWeights { layers, mu_head, d_head, l_head }
    }

    /// Standalone forward pass for one observation.
    pub fn encode(&self, xi: &[f64], y_onehot: &[f64], x: &Matrix) -> EncoderOutput {
        assert_eq!((x.rows(), x.cols()), (self.d, self.p), "design shape mismatch");
        let weights = self.unpack(xi);
        self.encode_with(&weights, y_onehot, x.as_slice())
    }

    /// Forward pass reusing unpacked weights (for batched evaluation).
    pub fn encode_with(
        &self,
        weights: &EncoderWeights,
        y_onehot: &[f64],
        x_flat: &[f64],
    ) -> EncoderOutput {
        let mut h = self.input_column(y_onehot, x_flat);
        for (w, b) in &weights.layers {
            let mut z = w.matvec(&h);
            for (zi, bi) in z.iter_mut().zip(b) {
                *zi = softplus(*zi + bi);
            }
            h = z;
        }
        let affine = |head: &(Matrix, Vec<f64>)| -> Vec<f64> {
            let mut z = head.0.matvec(&h);
            for (zi, bi) in z.iter_mut().zip(&head.1) {
                *zi += bi;
            }
            z
        };
        let mu = affine(&weights.mu_head);
        let mut dvec = affine(&weights.d_head);
        for v in &mut dvec {
            *v = softplus(*v);
        }
        let strict = affine(&weights.l_head);
        let mut l = Matrix::identity(self.d);
        let mut idx = 0;
        for i in 1..self.d {
            for j in 0..i {
                l.set(i, j, strict[idx]);
                idx += 1;
            }
        }
        EncoderOutput { mu, dvec, l }
    }

    /// Build the batched encoder forward on a tape: `xb` is an
    /// `input_dim × m` constant of stacked input columns, ξ is read from
    /// `flat` starting at `xi_offset`. Returns the three head nodes, each a
    /// matrix with one column per observation; the diagonal head already has
    /// softplus applied.
    ///
    /// Column arithmetic matches [`Encoder::encode`] bit for bit: the tape's
    /// matrix-matrix products accumulate in the same index order as the
    /// standalone matrix-vector products.
    pub fn build_tape_heads(
        &self,
        tape: &mut Tape,
        flat: &[f64],
        xi_offset: usize,
        xb: Var,
    ) -> Result<EncoderHeads, AdError> {
        let dims = self.matrix_dims();
        let mut offset = xi_offset;
        let mut input = |tape: &mut Tape, rows: usize, cols: usize| -> Result<(Var, Var), AdError> {
            let w = tape.input(rows, cols, flat, offset)?;
            offset += rows * cols;
            let b = tape.input(rows, 1, flat, offset)?;
            offset += rows;
            Ok((w, b))
        };

        let hidden = self.config.hidden_layers;
        let mut h = xb;
        for &(rows, cols) in dims.iter().take(hidden) {
            let (w, b) = input(tape, rows, cols)?;
            let z = tape.matmul(w, h)?;
            let zb = tape.add_col_broadcast(z, b)?;
            h = tape.softplus(zb)?;
        }
        let (wmu, bmu) = input(tape, dims[hidden].0, dims[hidden].1)?;
        let (wd, bd) = input(tape, dims[hidden + 1].0, dims[hidden + 1].1)?;
        let (wl, bl) = input(tape, dims[hidden + 2].0, dims[hidden + 2].1)?;

        let mu = {
            let z = tape.matmul(wmu, h)?;
            tape.add_col_broadcast(z, bmu)?
        };
        let dvec = {
            let z = tape.matmul(wd, h)?;
            let zb = tape.add_col_broadcast(z, bd)?;
            tape.softplus(zb)?
        };
        let lstrict = {
            let z = tape.matmul(wl, h)?;
            tape.add_col_broadcast(z, bl)?
        };
        Ok(EncoderHeads { mu, dvec, lstrict })
    }
}
