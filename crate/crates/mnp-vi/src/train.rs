//! Stochastic minibatch training: shuffle the data each epoch, estimate the
//! loss gradient on each batch with per-observation frozen noise, update all
//! parameters with one adaptive-moment rule, anneal the decoder temperature
//! geometrically per epoch, and stop when the windowed mean loss flattens.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, ParamVector};
use crate::encoder::{Encoder, EncoderConfig};
use crate::loss::{loss_and_grad, BatchNoise, LossSpec};
use crate::model::{ChoiceDataset, ModelError, ModelParams};
use crate::rng::{RngStream, StreamDomain};
use crate::surrogate::SurrogateScheme;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("numerical failure at step {step} (epoch {epoch}): {source}")]
    Numerical {
        step: usize,
        epoch: usize,
        #[source]
        source: AdError,
    },
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Config(e.to_string())
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub batch_size: usize,
    /// Monte-Carlo utility draws per observation; `None` picks 20 when
    /// d ≤ 3 and 100 otherwise.
    pub utility_samples: Option<usize>,
    pub max_epochs: usize,
    /// Convergence window length in steps.
    pub window: usize,
    /// Relative tolerance on the change of the windowed mean loss.
    pub tolerance: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta_start: 0.1,
            beta_end: 0.01,
            batch_size: 500,
            utility_samples: None,
            max_epochs: 50,
            window: 200,
            tolerance: 1e-3,
            seed: 0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Utility-draw default: 20 for small choice sets, 100 beyond.
    pub fn default_draws(d: usize) -> usize {
        if d <= 3 {
            20
        } else {
            100
        }
    }

    pub fn draws_for(&self, d: usize) -> usize {
        self.utility_samples.unwrap_or_else(|| Self::default_draws(d))
    }

    pub fn validate(&self, n: usize, d: usize) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !(self.beta_end > 0.0 && self.beta_end <= self.beta_start) {
            return Err(TrainError::Config(
                "temperatures must satisfy 0 < beta_end <= beta_start".into(),
            ));
        }
        if self.batch_size < 1 || self.batch_size > n {
            return Err(TrainError::Config(format!(
                "batch_size must be in 1..={n}, got {}",
                self.batch_size
            )));
        }
        if self.draws_for(d) < 1 {
            return Err(TrainError::Config("utility_samples must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(TrainError::Config("max_epochs must be at least 1".into()));
        }
        if self.window < 1 || !(self.tolerance > 0.0) {
            return Err(TrainError::Config(
                "convergence window and tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One recorded optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub beta: f64,
    /// Wall-clock seconds since training started.
    pub seconds: f64,
}

/// The full per-step loss history of a fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<TraceRecord>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    /// Mean total loss over a step range.
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.records[range];
        slice.iter().map(|r| r.total).sum::<f64>() / slice.len() as f64
    }
}

/// The trained state: final parameters, loss history, and timing.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ParamVector,
    pub scheme: SurrogateScheme,
    pub config: TrainConfig,
    pub trace: LossTrace,
    pub epochs_run: usize,
    pub steps_run: usize,
    pub converged: bool,
    pub seconds: f64,
    /// Total utility draws whose decoded probability hit the floor.
    pub clamped_draws: usize,
}

impl FitResult {
    /// The identified model view of the final parameters.
    ///
    /// The loss pairs `a` with the trace-normalized ΔΣ̄ on every step, so
    /// the taste estimates already live on the identified scale while the
    /// stored covariance's overall scale is a gauge direction the optimizer
    /// may drift along. Normalizing the covariance *without* rescaling `a`
    /// therefore reads off exactly the model the loss scored.
    pub fn model_params(&self) -> ModelParams {
        let raw = self.params.model_params();
        ModelParams::from_covariance(raw.d(), raw.a.clone(), &raw.delta_sigma_bar())
            .expect("trace normalization preserves positive definiteness")
    }
}

/// Geometric temperature interpolation: β(0) = start, β(total−1) = end.
/// A single-epoch schedule stays at `beta_start`.
pub fn anneal(beta_start: f64, beta_end: f64, epoch: usize, total_epochs: usize) -> f64 {
    assert!(total_epochs >= 1, "need at least one epoch");
    assert!(beta_start > 0.0 && beta_end > 0.0, "temperatures must be positive");
    if total_epochs == 1 {
        return beta_start;
    }
    let t = epoch.min(total_epochs - 1) as f64 / (total_epochs - 1) as f64;
    beta_start * (beta_end / beta_start).powf(t)
}

/// `m` distinct indices from 0..n, uniformly, via partial Fisher–Yates.
pub fn sample_batch(n: usize, m: usize, rng: &mut RngStream) -> Vec<usize> {
    assert!(m >= 1 && m <= n, "need 1 <= m <= n");
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx
}

/// Bias-corrected adaptive-moment update with one learning rate for every
/// parameter segment.
#[derive(Debug, Clone)]
pub struct Adam {
    alpha: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: u32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, alpha: f64) -> Adam {
        Adam {
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter length mismatch");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.alpha * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}

/// True when the mean over the last window moved by less than `tau`
/// relative to the mean over the window before it.
pub fn windowed_converged(totals: &[f64], window: usize, tau: f64) -> bool {
    if totals.len() < 2 * window {
        return false;
    }
    let last = &totals[totals.len() - window..];
    let prev = &totals[totals.len() - 2 * window..totals.len() - window];
    let mean_last: f64 = last.iter().sum::<f64>() / window as f64;
    let mean_prev: f64 = prev.iter().sum::<f64>() / window as f64;
    (mean_last - mean_prev).abs() < tau * mean_prev.abs().max(f64::MIN_POSITIVE)
}

/// Train the encoder and model parameters on a dataset.
pub fn fit(
    data: &ChoiceDataset,
    scheme: SurrogateScheme,
    config: &TrainConfig,
) -> Result<FitResult, TrainError> {
    config.validate(data.n(), data.d())?;
    let d = data.d();
    let p = data.p();
    let draws = config.draws_for(d);
    let encoder = Encoder::new(d, p, config.encoder)?;

    // Initial state: seeded encoder weights, zero tastes, identity ΔΣ.
    let mut init_rng = RngStream::keyed(config.seed, StreamDomain::Init, 0, 0);
    let xi = encoder.init_weights(&mut init_rng);
    let neutral = ModelParams::neutral(d, p);
    let mut params = ParamVector::from_parts(d, xi, &neutral.a, neutral.cov_param())
        .map_err(|e| TrainError::Config(e.to_string()))?;

    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut trace = LossTrace::default();
    let mut clamped = 0usize;
    let mut converged = false;
    let mut step = 0usize;
    let mut epochs_run = 0usize;
    let started = Instant::now();

    'epochs: for epoch in 0..config.max_epochs {
        epochs_run = epoch + 1;
        let beta = anneal(config.beta_start, config.beta_end, epoch, config.max_epochs);
        let spec = LossSpec { data, encoder: &encoder, scheme, beta, draws };

        let mut shuffle_rng = RngStream::keyed(config.seed, StreamDomain::Shuffle, epoch as u64, 0);
        let order = sample_batch(data.n(), data.n(), &mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            let noise =
                BatchNoise::generate(config.seed, epoch as u64, batch, d, draws, scheme);
            let result = loss_and_grad(&spec, &params, batch, &noise)
                .map_err(|source| TrainError::Numerical { step, epoch, source })?;

            adam.step(params.values_mut(), &result.grad);
            debug_assert!(
                params.model_params().delta_sigma().cholesky().is_ok(),
                "the covariance parameterization must stay PD"
            );

            clamped += result.clamped_draws;
            trace.records.push(TraceRecord {
                step,
                epoch,
                l1: result.loss.l1,
                l2: result.loss.l2,
                total: result.loss.total,
                beta,
                seconds: started.elapsed().as_secs_f64(),
            });
            step += 1;

            if windowed_converged(&trace.totals(), config.window, config.tolerance) {
                converged = true;
                break 'epochs;
            }
        }
    }

    Ok(FitResult {
        params,
        scheme,
        config: *config,
        trace,
        epochs_run,
        steps_run: step,
        converged,
        seconds: started.elapsed().as_secs_f64(),
        clamped_draws: clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Activation;
    use crate::sim::{simulate, DesignLayout, SimConfig};

    fn small_config(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            utility_samples: Some(5),
            max_epochs: 3,
            window: 400,
            tolerance: 1e-6,
            seed,
            encoder: EncoderConfig {
                hidden_layers: 1,
                hidden_width: 8,
                activation: Activation::Softplus,
            },
            ..TrainConfig::default()
        }
    }

    fn small_data(seed: u64, n: usize) -> ChoiceDataset {
        let cfg = SimConfig {
            n,
            d: 3,
            layout: DesignLayout::Paper3Alt,
            seed,
            true_a: None,
            true_delta_sigma: None,
        };
        simulate(&cfg).unwrap().0
    }

    #[test]
    fn anneal_hits_both_endpoints_geometrically() {
        assert_eq!(anneal(0.1, 0.01, 0, 50), 0.1);
        assert!((anneal(0.1, 0.01, 49, 50) - 0.01).abs() < 1e-15);
        // Three-epoch midpoint is the geometric mean √(0.1·0.01).
        let mid = anneal(0.1, 0.01, 1, 3);
        assert!((mid - 0.031_622_776_601_683_79).abs() < 1e-12);
        // Monotone non-increasing across a long schedule.
        let mut prev = f64::INFINITY;
        for e in 0..50 {
            let b = anneal(0.1, 0.01, e, 50);
            assert!(b <= prev + 1e-15);
            prev = b;
        }
        // Degenerate one-epoch schedule.
        assert_eq!(anneal(0.1, 0.01, 0, 1), 0.1);
    }

    #[test]
    fn adam_matches_hand_computation() {
        // One parameter, constant unit gradient.
        let mut adam = Adam::new(1, 0.5);
        let mut theta = vec![1.0];
        adam.step(&mut theta, &[1.0]);
        // Step 1: mhat = 1, vhat = 1 → θ = 1 − 0.5·1/(1 + 1e-8).
        let expect1 = 1.0 - 0.5 / (1.0 + 1e-8);
        assert!((theta[0] - expect1).abs() < 1e-12);

        adam.step(&mut theta, &[1.0]);
        // Step 2 by hand: m = 0.19, v = 0.001999, corrections 0.19 / 0.001999.
        let m = 0.9 * 0.1 + 0.1;
        let v = 0.999 * 0.001 + 0.001;
        let mhat = m / (1.0 - 0.9f64.powi(2));
        let vhat = v / (1.0 - 0.999f64.powi(2));
        let expect2 = expect1 - 0.5 * mhat / (vhat.sqrt() + 1e-8);
        assert!((theta[0] - expect2).abs() < 1e-12);
    }

    #[test]
    fn sample_batch_with_m_equal_n_is_a_permutation() {
        let mut rng = RngStream::keyed(101, StreamDomain::Test, 0, 0);
        let mut perm = sample_batch(20, 20, &mut rng);
        perm.sort_unstable();
        assert_eq!(perm, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn sample_batch_indices_are_distinct_and_uniform() {
        let mut rng = RngStream::keyed(102, StreamDomain::Test, 0, 0);
        let n = 10;
        let m = 3;
        let trials = 10_000;
        let mut counts = vec![0usize; n];
        for _ in 0..trials {
            let batch = sample_batch(n, m, &mut rng);
            let mut sorted = batch.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), m, "indices must be distinct");
            for i in batch {
                counts[i] += 1;
            }
        }
        let expect = m as f64 / n as f64;
        let se = (expect * (1.0 - expect) / trials as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!(
                (freq - expect).abs() < 4.0 * se,
                "index {i} included with frequency {freq}, expected {expect}"
            );
        }
    }

    #[test]
    fn windowed_convergence_detects_plateaus_only() {
        let falling: Vec<f64> = (0..40).map(|i| 100.0 - 2.0 * i as f64).collect();
        assert!(!windowed_converged(&falling, 10, 1e-3));
        let flat = vec![50.0; 40];
        assert!(windowed_converged(&flat, 10, 1e-3));
        let short = vec![50.0; 15];
        assert!(!windowed_converged(&short, 10, 1e-3), "needs two full windows");
    }

    #[test]
    fn fit_is_deterministic_for_a_fixed_seed() {
        let data = small_data(7, 96);
        let config = small_config(21);
        let a = fit(&data, SurrogateScheme::Combined, &config).unwrap();
        let b = fit(&data, SurrogateScheme::Combined, &config).unwrap();
        assert_eq!(a.params.values(), b.params.values());
        assert_eq!(a.trace.totals(), b.trace.totals());
        assert_eq!(a.steps_run, b.steps_run);
        assert_eq!(a.clamped_draws, b.clamped_draws);
    }

    #[test]
    fn fit_is_invariant_to_worker_thread_count() {
        let data = small_data(8, 96);
        let config = small_config(22);
        let run = |threads: usize| {
            let pool =
                rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| fit(&data, SurrogateScheme::GumbelSoftmax, &config))
        };
        let one = run(1).unwrap();
        let four = run(4).unwrap();
        assert_eq!(one.steps_run, four.steps_run);
        assert_eq!(one.params.values(), four.params.values());
        assert_eq!(one.trace.totals(), four.trace.totals());
    }

    #[test]
    fn fit_reduces_the_loss_on_simulated_data() {
        let data = small_data(9, 512);
        let mut config = small_config(23);
        config.batch_size = 64;
        config.max_epochs = 20;
        let result = fit(&data, SurrogateScheme::Combined, &config).unwrap();
        assert_eq!(result.steps_run, result.trace.len());
        let steps = result.trace.len();
        let head = result.trace.mean_total(0..steps / 4);
        let tail = result.trace.mean_total(steps - steps / 4..steps);
        assert!(
            tail < head,
            "training must reduce the loss: first-quarter mean {head}, last-quarter {tail}"
        );
        // The covariance stays on the identified scale after normalization.
        let bar = result.model_params().delta_sigma_bar();
        assert!((bar.trace() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn reported_params_normalize_the_covariance_but_not_the_tastes() {
        // The optimizer's taste block is already on the identified scale
        // (the loss regresses it against ΔΣ̄ on every step); only the stored
        // covariance's free overall scale gets pinned at reporting time.
        let data = small_data(11, 256);
        let mut config = small_config(31);
        config.batch_size = 64;
        config.max_epochs = 4;
        let result = fit(&data, SurrogateScheme::Combined, &config).unwrap();
        let raw = result.params.model_params();
        let reported = result.model_params();
        assert_eq!(reported.a, raw.a, "tastes pass through unchanged");
        assert!((reported.delta_sigma().trace() - (data.d() - 1) as f64).abs() < 1e-9);
        for (lhs, rhs) in reported
            .delta_sigma()
            .as_slice()
            .iter()
            .zip(raw.delta_sigma_bar().as_slice())
        {
            assert!((lhs - rhs).abs() < 1e-9, "reported covariance is the normalized one");
        }
    }

    #[test]
    fn fit_trace_is_well_formed() {
        let data = small_data(10, 96);
        let config = small_config(24);
        let result = fit(&data, SurrogateScheme::Ste, &config).unwrap();
        assert_eq!(result.epochs_run, 3);
        assert_eq!(result.steps_run, 9);
        let mut prev_seconds = 0.0;
        for (i, r) in result.trace.records.iter().enumerate() {
            assert_eq!(r.step, i, "step index is dense and monotone");
            assert_eq!(r.epoch, i / 3);
            assert!(r.total.is_finite() && r.l1.is_finite() && r.l2.is_finite());
            assert!(r.l2 > -1e-9, "KL term stays nonnegative");
            assert!(r.seconds >= prev_seconds);
            prev_seconds = r.seconds;
            let expect_beta = anneal(0.1, 0.01, r.epoch, 3);
            assert_eq!(r.beta, expect_beta);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let data = small_data(11, 32);
        let mut config = small_config(25);
        config.batch_size = 64;
        assert!(matches!(
            fit(&data, SurrogateScheme::Ste, &config),
            Err(TrainError::Config(_))
        ));
        let mut config2 = small_config(25);
        config2.beta_end = 0.5; // above beta_start
        assert!(fit(&data, SurrogateScheme::Ste, &config2).is_err());
        let mut config3 = small_config(25);
        config3.learning_rate = 0.0;
        assert!(fit(&data, SurrogateScheme::Ste, &config3).is_err());
    }
}
