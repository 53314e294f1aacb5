//! The training objective: a Monte-Carlo reconstruction term driven by the
//! argmax surrogate plus a closed-form Gaussian divergence between each
//! observation's variational posterior (pushed into differenced space) and
//! the differenced model prior, scaled to an unbiased full-data estimate.
//!
//! Gradients come from per-chunk tapes: the batch is split into fixed-size
//! chunks, each chunk builds and sweeps its own tape, and the partial
//! results are reduced in chunk order so the outcome is identical no matter
//! how many worker threads run the chunks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdError, L1McSpec, ParamLayout, ParamVector, Tape, Var, PROB_FLOOR};
use crate::encoder::Encoder;
use crate::matrix::Matrix;
use crate::model::{difference_gaussian, ChoiceDataset, ModelError};
use crate::rng::{RngStream, StreamDomain};
use crate::surrogate::{decode, SurrogateScheme};

/// Observations per gradient tape. Fixed (rather than derived from the
/// thread count) so results are bit-identical across machines.
pub const CHUNK: usize = 32;

/// Everything the loss needs besides the parameters: the data, the encoder
/// shape, and the surrogate settings.
#[derive(Clone, Copy)]
pub struct LossSpec<'a> {
    pub data: &'a ChoiceDataset,
    pub encoder: &'a Encoder,
    pub scheme: SurrogateScheme,
    /// Surrogate temperature (> 0).
    pub beta: f64,
    /// Monte-Carlo utility draws per observation.
    pub draws: usize,
}

impl LossSpec<'_> {
    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            xi_len: self.encoder.xi_len(),
            p: self.data.p(),
            d: self.data.d(),
        }
    }

    fn validate(&self, params: &ParamVector) {
        assert_eq!(self.data.d(), self.encoder.d(), "data/encoder d mismatch");
        assert_eq!(self.data.p(), self.encoder.p(), "data/encoder p mismatch");
        assert_eq!(*params.layout(), self.layout(), "parameter layout mismatch");
        assert!(self.beta > 0.0, "temperature must be positive");
        assert!(self.draws >= 1, "need at least one utility draw");
    }
}

/// Loss components for one batch, already scaled by `batch_scale = n/m` so
/// they estimate the full-data objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub batch_scale: f64,
}

/// Forward-only batch evaluation.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub loss: LossBreakdown,
    /// Utility draws whose decoded choice probability hit the floor.
    pub clamped_draws: usize,
}

/// Batch evaluation with the gradient of `loss.total` in flat layout.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: LossBreakdown,
    pub clamped_draws: usize,
    pub grad: Vec<f64>,
}

/// Per-observation Monte-Carlo noise for one batch, drawn from streams
/// keyed by (epoch, observation index) so an observation's noise does not
/// depend on which batch it lands in or on the batch order.
#[derive(Debug, Clone)]
pub struct BatchNoise {
    d: usize,
    draws: usize,
    z: Vec<f64>,
    gumbel: Vec<f64>,
}

impl BatchNoise {
    pub fn generate(
        seed: u64,
        epoch: u64,
        indices: &[usize],
        d: usize,
        draws: usize,
        scheme: SurrogateScheme,
    ) -> BatchNoise {
        let per_obs = draws * d;
        let mut z = Vec::with_capacity(indices.len() * per_obs);
        let mut gumbel = if scheme.uses_noise() {
            Vec::with_capacity(indices.len() * per_obs)
        } else {
            Vec::new()
        };
        for &i in indices {
            let mut rng = RngStream::keyed(seed, StreamDomain::Noise, epoch, i as u64);
            for _ in 0..per_obs {
                z.push(rng.standard_normal());
            }
            if scheme.uses_noise() {
                for _ in 0..per_obs {
                    gumbel.push(rng.gumbel());
                }
            }
        }
        BatchNoise { d, draws, z, gumbel }
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    pub fn len(&self) -> usize {
        self.z.len() / (self.draws * self.d)
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Standard-normal draws for batch position `pos` (draws × d flat).
    pub fn z_slice(&self, pos: usize) -> &[f64] {
        let per_obs = self.draws * self.d;
        &self.z[pos * per_obs..(pos + 1) * per_obs]
    }

    /// Standard-Gumbel draws for batch position `pos`; empty when the
    /// scheme draws no decoder noise.
    pub fn gumbel_slice(&self, pos: usize) -> &[f64] {
        if self.gumbel.is_empty() {
            &[]
        } else {
            let per_obs = self.draws * self.d;
            &self.gumbel[pos * per_obs..(pos + 1) * per_obs]
        }
    }
}

/// KL(q ‖ p) between Gaussians with means and covariances given explicitly:
/// ½[log det Σ_p − log det Σ_q − k + (m_p−m_q)ᵀΣ_p⁻¹(m_p−m_q) + tr(Σ_p⁻¹Σ_q)].
pub fn gaussian_kl(
    mean_q: &[f64],
    sigma_q: &Matrix,
    mean_p: &[f64],
    sigma_p: &Matrix,
) -> Result<f64, ModelError> {
    let k = mean_q.len();
    assert_eq!(mean_p.len(), k, "mean length mismatch");
    assert_eq!((sigma_q.rows(), sigma_q.cols()), (k, k), "sigma_q shape mismatch");
    assert_eq!((sigma_p.rows(), sigma_p.cols()), (k, k), "sigma_p shape mismatch");
    let ld_p = sigma_p.logdet_pd()?;
    let inv_p = sigma_p.inverse_pd()?;
    let ld_q = sigma_q.logdet_pd()?;
    Ok(l2_with_prior(ld_p, &inv_p, ld_q, mean_p, mean_q, sigma_q))
}

/// The divergence with the prior pieces precomputed (they are shared by
/// every observation in a batch).
fn l2_with_prior(
    prior_logdet: f64,
    prior_inv: &Matrix,
    q_logdet: f64,
    mean_p: &[f64],
    mean_q: &[f64],
    sigma_q: &Matrix,
) -> f64 {
    let k = mean_q.len();
    let diff: Vec<f64> = mean_p.iter().zip(mean_q).map(|(a, b)| a - b).collect();
    let t = prior_inv.matvec(&diff);
    let quad = crate::matrix::dot(&diff, &t);
    let tr = crate::matrix::dot(prior_inv.as_slice(), sigma_q.as_slice());
    0.5 * (prior_logdet - q_logdet - k as f64 + quad + tr)
}

/// Forward-only loss over a batch of observation indices. `noise` must have
/// been generated for exactly these indices in this order.
pub fn loss_for_batch(
    spec: &LossSpec,
    params: &ParamVector,
    indices: &[usize],
    noise: &BatchNoise,
) -> Result<BatchEvaluation, ModelError> {
    spec.validate(params);
    assert!(!indices.is_empty(), "batch must be non-empty");
    assert_eq!(noise.len(), indices.len(), "noise/batch size mismatch");
    assert_eq!(noise.d, spec.data.d(), "noise dimension mismatch");
    assert_eq!(noise.draws, spec.draws, "noise draw count mismatch");

    let d = spec.data.d();
    let weights = spec.encoder.unpack(params.xi());
    let mparams = params.model_params();
    let bar = mparams.delta_sigma_bar();
    let bar_logdet = bar.logdet_pd()?;
    let bar_inv = bar.inverse_pd()?;

    let zero_noise = vec![0.0; d];
    let mut l1_sum = 0.0;
    let mut l2_sum = 0.0;
    let mut clamps = 0usize;
    // Sum per chunk, then across chunks, matching the gradient route's
    // grouping so both report bit-identical loss values.
    for (ci, chunk) in indices.chunks(CHUNK).enumerate() {
        let mut l1_chunk = 0.0;
        let mut l2_chunk = 0.0;
        for (c, &i) in chunk.iter().enumerate() {
            let pos = ci * CHUNK + c;
            let y = spec.data.choice(i);
            let out = spec.encoder.encode_with(
                &weights,
                &spec.data.one_hot(i),
                spec.data.design_slice(i),
            );

            let zs = noise.z_slice(pos);
            let gs = noise.gumbel_slice(pos);
            let mut draw_sum = 0.0;
            for s in 0..spec.draws {
                let u = out.sample(&zs[s * d..(s + 1) * d]);
                let g = if gs.is_empty() { &zero_noise[..] } else { &gs[s * d..(s + 1) * d] };
                let dec = decode(&u, spec.scheme, spec.beta, g);
                let p_choice = dec.forward[y];
                if p_choice < PROB_FLOOR {
                    clamps += 1;
                }
                draw_sum -= p_choice.max(PROB_FLOOR).ln();
            }
            l1_chunk += draw_sum / spec.draws as f64;

            let (dmu_q, dsigma_q) = difference_gaussian(&out.mu, &out.sigma());
            let prior_mean = spec.data.differenced_design(i).matvec(&mparams.a);
            let q_logdet = dsigma_q.logdet_pd()?;
            l2_chunk +=
                l2_with_prior(bar_logdet, &bar_inv, q_logdet, &prior_mean, &dmu_q, &dsigma_q);
        }
        l1_sum += l1_chunk;
        l2_sum += l2_chunk;
    }
    debug_assert!(l2_sum > -1e-9 * indices.len() as f64, "KL must be nonnegative");

    let batch_scale = spec.data.n() as f64 / indices.len() as f64;
    let l1 = batch_scale * l1_sum;
    let l2 = batch_scale * l2_sum;
    Ok(BatchEvaluation {
        loss: LossBreakdown { l1, l2, total: l1 + l2, batch_scale },
        clamped_draws: clamps,
    })
}

/// Node handles for one chunk's tape.
pub struct BatchTape {
    /// Scalar root: batch_scale · Σᵢ (L1ᵢ + L2ᵢ) over this chunk.
    pub root: Var,
    pub l1_terms: Vec<Var>,
    pub l2_terms: Vec<Var>,
}

/// Build the loss graph for a slice of observations on one tape. `flat` is
/// the full parameter vector; `first_pos` is the batch position of
/// `indices[0]` inside `noise`.
pub fn build_batch_tape(
    tape: &mut Tape,
    spec: &LossSpec,
    flat: &[f64],
    indices: &[usize],
    noise: &BatchNoise,
    first_pos: usize,
    batch_scale: f64,
) -> Result<BatchTape, AdError> {
    let layout = spec.layout();
    let d = layout.d;
    let k = d - 1;

    // Prior side, shared by every observation in the chunk.
    let a_var = tape.input(layout.p, 1, flat, layout.a_range().start)?;
    let cov_start = layout.cov_range().start;
    let raw_diag = tape.input(k, 1, flat, cov_start)?;
    let gdiag = tape.softplus(raw_diag)?;
    let g = if k == 1 {
        gdiag
    } else {
        let strict = tape.input(k * (k - 1) / 2, 1, flat, cov_start + k)?;
        tape.build_lower_tri(gdiag, strict)?
    };
    let dsigma = tape.matmul_tb(g, g)?;
    let tr = tape.trace(dsigma)?;
    let tr_inv = tape.recip(tr)?;
    let scaled = tape.scalar_mul(tr_inv, dsigma)?;
    let bar = tape.scale_const(scaled, k as f64)?;
    let ld_bar = tape.logdet_pd(bar)?;
    let inv_bar = tape.inv_pd(bar)?;

    // Amortized encoder over the chunk's stacked inputs.
    let xb = tape.constant(spec.encoder.input_columns(spec.data, indices))?;
    let heads = spec.encoder.build_tape_heads(tape, flat, layout.xi_range().start, xb)?;

    let mut l1_terms = Vec::with_capacity(indices.len());
    let mut l2_terms = Vec::with_capacity(indices.len());
    for (c, &i) in indices.iter().enumerate() {
        let mu_c = tape.col_slice(heads.mu, c)?;
        let dv_c = tape.col_slice(heads.dvec, c)?;
        let ls_c = tape.col_slice(heads.lstrict, c)?;
        let lmat = tape.unit_lower_tri(ls_c, d)?;

        let pos = first_pos + c;
        let l1 = tape.l1_mc(
            mu_c,
            lmat,
            dv_c,
            L1McSpec {
                y_idx: spec.data.choice(i),
                scheme: spec.scheme,
                beta: spec.beta,
                count: spec.draws,
                z: noise.z_slice(pos).to_vec(),
                gumbel: noise.gumbel_slice(pos).to_vec(),
            },
        )?;
        l1_terms.push(l1);

        // Differenced variational moments: Δμ = C·μ, ΔΣ_q = (CL)·D·(CL)ᵀ.
        let dmu_q = tape.diff_rows(mu_c)?;
        let dl = tape.diff_rows(lmat)?;
        let dld = tape.col_scale_vec(dl, dv_c)?;
        let dsigma_q = tape.matmul_tb(dld, dl)?;
        let ld_q = tape.logdet_pd(dsigma_q)?;
        let tr_q = tape.frob_dot(inv_bar, dsigma_q)?;

        let dx = tape.constant(spec.data.differenced_design(i))?;
        let dxa = tape.matmul(dx, a_var)?;
        let diff = tape.sub(dxa, dmu_q)?;
        let t = tape.matmul(inv_bar, diff)?;
        let quad = tape.dot(diff, t)?;

        let l2 = tape.affine_combine(
            vec![(0.5, ld_bar), (-0.5, ld_q), (0.5, quad), (0.5, tr_q)],
            -0.5 * k as f64,
        )?;
        l2_terms.push(l2);
    }

    let mut terms = Vec::with_capacity(2 * indices.len());
    for &v in l1_terms.iter().chain(&l2_terms) {
        terms.push((batch_scale, v));
    }
    let root = tape.affine_combine(terms, 0.0)?;
    Ok(BatchTape { root, l1_terms, l2_terms })
}

struct ChunkOut {
    l1_sum: f64,
    l2_sum: f64,
    clamps: usize,
    grad: Vec<f64>,
}

/// Batch loss and gradient via per-chunk tapes. Chunks may run on worker
/// threads, but partial results are reduced in chunk order, so the result
/// is independent of the thread count.
pub fn loss_and_grad(
    spec: &LossSpec,
    params: &ParamVector,
    indices: &[usize],
    noise: &BatchNoise,
) -> Result<BatchGradient, AdError> {
    spec.validate(params);
    assert!(!indices.is_empty(), "batch must be non-empty");
    assert_eq!(noise.len(), indices.len(), "noise/batch size mismatch");

    let layout = spec.layout();
    let batch_scale = spec.data.n() as f64 / indices.len() as f64;
    let chunk_results: Vec<Result<ChunkOut, AdError>> = indices
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut tape = Tape::new();
            let nodes =
                build_batch_tape(&mut tape, spec, params.values(), chunk, noise, ci * CHUNK, batch_scale)?;
            let grad = tape.gradient(nodes.root, layout.total())?;
            let mut l1_sum = 0.0;
            for &v in &nodes.l1_terms {
                l1_sum += tape.value(v).get(0, 0);
            }
            let mut l2_sum = 0.0;
            for &v in &nodes.l2_terms {
                l2_sum += tape.value(v).get(0, 0);
            }
            Ok(ChunkOut { l1_sum, l2_sum, clamps: tape.clamp_count(), grad })
        })
        .collect();

    let mut l1_sum = 0.0;
    let mut l2_sum = 0.0;
    let mut clamps = 0usize;
    let mut grad = vec![0.0; layout.total()];
    for result in chunk_results {
        let chunk = result?;
        l1_sum += chunk.l1_sum;
        l2_sum += chunk.l2_sum;
        clamps += chunk.clamps;
        for (g, c) in grad.iter_mut().zip(&chunk.grad) {
            *g += c;
        }
    }
    debug_assert!(l2_sum > -1e-9 * indices.len() as f64, "KL must be nonnegative");

    let l1 = batch_scale * l1_sum;
    let l2 = batch_scale * l2_sum;
    Ok(BatchGradient {
        loss: LossBreakdown { l1, l2, total: l1 + l2, batch_scale },
        clamped_draws: clamps,
        grad,
    })
}
