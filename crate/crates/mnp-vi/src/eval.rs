//! Predictive metrics and bootstrap uncertainty quantification.
//!
//! Choice probabilities under the fitted model have no closed form, so they
//! are estimated by Monte Carlo: draw differenced utilities
//! `Δu ~ N(ΔX·a, ΔΣ̄)` and tally the deterministic choice rule. All
//! observations share one set of common random shocks, which removes
//! draw-to-draw noise from cross-observation and cross-model comparisons
//! and makes the estimates a deterministic function of `(θ, seed)`.
//! Tallies are add-half smoothed — `(count + ½)/(R + d/2)` — so every
//! probability is strictly positive and the log score stays finite.
//!
//! Reported metrics: hit rate of the modal prediction, mean log
//! probability of the observed choice, mean Euclidean distance between the
//! probability vector and the observed one-hot (the Brier form used
//! throughout), and, when ground truth is available, the root mean square
//! error over the identified parameter vector.

use crate::matrix::Matrix;
use crate::model::{choose_differenced, ChoiceDataset, ModelError, ModelParams};
use crate::rng::{RngStream, StreamDomain};
use crate::surrogate::SurrogateScheme;
use crate::train::{fit, FitResult, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Default number of Monte-Carlo draws behind each probability estimate.
pub const DEFAULT_PROBABILITY_DRAWS: usize = 10_000;

/// Fraction of observations held out by [`train_test_split`].
pub const TEST_FRACTION: f64 = 0.2;

/// Which slice of the data a [`MetricReport`] was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleTag {
    InSample,
    OutOfSample,
}

impl std::fmt::Display for SampleTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SampleTag::InSample => write!(f, "in-sample"),
            SampleTag::OutOfSample => write!(f, "out-of-sample"),
        }
    }
}

/// Predictive-quality summary for one parameter estimate on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Share of observations whose modal predicted choice matches the
    /// observed one.
    pub hit_rate: f64,
    /// Mean log probability assigned to the observed choices (≤ 0).
    pub log_score: f64,
    /// Mean Euclidean distance between predicted probabilities and the
    /// observed one-hot vectors (≥ 0).
    pub brier_score: f64,
    /// Root mean square error over the identified parameter vector;
    /// present only when ground truth was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    pub sample_tag: SampleTag,
}

impl MetricReport {
    /// Flat `key value` lines, one metric per line, for terminal output.
    pub fn flat_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("sample      {}\n", self.sample_tag));
        out.push_str(&format!("hit_rate    {:.6}\n", self.hit_rate));
        out.push_str(&format!("log_score   {:.6}\n", self.log_score));
        out.push_str(&format!("brier_score {:.6}\n", self.brier_score));
        if let Some(rmse) = self.rmse {
            out.push_str(&format!("rmse        {:.6}\n", rmse));
        }
        out
    }
}

/// Options for [`metrics`].
#[derive(Debug, Clone, Copy)]
pub struct MetricOptions {
    /// Monte-Carlo draws per probability estimate.
    pub draws: usize,
    /// Seed of the shared shock stream.
    pub seed: u64,
    /// Tag recorded in the report.
    pub sample_tag: SampleTag,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            draws: DEFAULT_PROBABILITY_DRAWS,
            seed: 0,
            sample_tag: SampleTag::InSample,
        }
    }
}

/// Common random shocks: `draws` pre-multiplied rows `F·z`, with
/// `F·Fᵀ = ΔΣ̄`, shared across observations.
fn gaussian_shocks(chol: &Matrix, draws: usize, rng: &mut RngStream) -> Vec<f64> {
    let k = chol.rows();
    let mut shocks = vec![0.0; draws * k];
    let mut z = vec![0.0; k];
    for r in 0..draws {
        for zi in z.iter_mut() {
            *zi = rng.standard_normal();
        }
        let row = &mut shocks[r * k..(r + 1) * k];
        for i in 0..k {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += chol.get(i, j) * z[j];
            }
            row[i] = acc;
        }
    }
    shocks
}

/// Tallies the choice rule over pre-drawn shocks and returns add-half
/// smoothed frequencies `(count + ½)/(R + d/2)`.
fn tally_probabilities(mean: &[f64], shocks: &[f64], d: usize) -> Vec<f64> {
    let k = d - 1;
    let draws = shocks.len() / k;
    let mut counts = vec![0usize; d];
    let mut du = vec![0.0; k];
    for r in 0..draws {
        let row = &shocks[r * k..(r + 1) * k];
        for i in 0..k {
            du[i] = mean[i] + row[i];
        }
        counts[choose_differenced(&du, 0.0)] += 1;
    }
    let denom = draws as f64 + d as f64 / 2.0;
    counts.iter().map(|&c| (c as f64 + 0.5) / denom).collect()
}

/// Monte-Carlo choice probabilities for one observation.
///
/// Draws `Δu ~ N(ΔX·a, ΔΣ̄)` `draws` times from `rng`, tallies the choice
/// rule, and returns add-half smoothed frequencies over the `d`
/// alternatives. Strictly positive entries summing to one (up to
/// round-off); deterministic given `(params, dx, rng state)`.
pub fn choice_probabilities(
    params: &ModelParams,
    dx: &Matrix,
    draws: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>, ModelError> {
    let k = params.k();
    if dx.rows() != k || dx.cols() != params.p() {
        return Err(ModelError::InvalidParams(format!(
            "differenced design is {}x{}, expected {k}x{}",
            dx.rows(),
            dx.cols(),
            params.p()
        )));
    }
    if draws == 0 {
        return Err(ModelError::InvalidParams(
            "need at least one probability draw".into(),
        ));
    }
    // Work on the identified scale so equivalent parameter pairs (joint
    // utility rescalings) produce byte-identical probabilities.
    let ident = params.identified_params();
    let chol = ident.delta_sigma().cholesky()?;
    let shocks = gaussian_shocks(&chol, draws, rng);
    let mean = dx.matvec(&ident.a);
    Ok(tally_probabilities(&mean, &shocks, params.d()))
}

/// Per-observation scores induced by a probability vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationScore {
    /// Modal predicted alternative (ties broken by lowest index).
    pub predicted: usize,
    /// Log probability of the observed choice.
    pub log_probability: f64,
    /// Euclidean distance between the probability vector and the observed
    /// one-hot vector.
    pub brier: f64,
}

/// Scores one observation from its probability vector.
pub fn score_observation(probabilities: &[f64], choice: usize) -> ObservationScore {
    let predicted = probabilities
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
        .map(|(i, _)| i)
        .expect("non-empty probabilities");
    // max_by returns the last maximum; rescan for the lowest tied index.
    let max = probabilities[predicted];
    let predicted = probabilities
        .iter()
        .position(|&p| p == max)
        .expect("maximum exists");
    let mut sq = 0.0;
    for (i, &p) in probabilities.iter().enumerate() {
        let target = if i == choice { 1.0 } else { 0.0 };
        sq += (p - target) * (p - target);
    }
    ObservationScore {
        predicted,
        log_probability: probabilities[choice].ln(),
        brier: sq.sqrt(),
    }
}

/// Root mean square error between two parameter sets over the identified
/// vector `(a, vech ΔΣ̄)`.
pub fn rmse(estimate: &ModelParams, truth: &ModelParams) -> Result<f64, ModelError> {
    if estimate.d() != truth.d() || estimate.p() != truth.p() {
        return Err(ModelError::InvalidParams(format!(
            "cannot compare (d={}, p={}) against (d={}, p={})",
            estimate.d(),
            estimate.p(),
            truth.d(),
            truth.p()
        )));
    }
    let lhs = estimate.identified_vector();
    let rhs = truth.identified_vector();
    let sum_sq: f64 = lhs
        .iter()
        .zip(&rhs)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sum_sq / lhs.len() as f64).sqrt())
}

/// Computes the metric report for `params` on `data`.
///
/// Probabilities for all observations share one common-random-number shock
/// stream keyed by `options.seed`, so repeated calls are deterministic.
/// `truth` adds the parameter RMSE to the report.
pub fn metrics(
    data: &ChoiceDataset,
    params: &ModelParams,
    truth: Option<&ModelParams>,
    options: &MetricOptions,
) -> Result<MetricReport, ModelError> {
    if data.d() != params.d() || data.p() != params.p() {
        return Err(ModelError::InvalidParams(format!(
            "dataset (d={}, p={}) incompatible with parameters (d={}, p={})",
            data.d(),
            data.p(),
            params.d(),
            params.p()
        )));
    }
    if options.draws == 0 {
        return Err(ModelError::InvalidParams(
            "need at least one probability draw".into(),
        ));
    }
    let n = data.n();
    let chol = params.delta_sigma_bar().cholesky()?;
    let mut rng = RngStream::keyed(options.seed, StreamDomain::Eval, 0, 0);
    let shocks = gaussian_shocks(&chol, options.draws, &mut rng);

    let mut hits = 0usize;
    let mut log_sum = 0.0;
    let mut brier_sum = 0.0;
    for i in 0..n {
        let mean = data.differenced_design(i).matvec(&params.a);
        let probabilities = tally_probabilities(&mean, &shocks, data.d());
        let score = score_observation(&probabilities, data.choice(i));
        hits += usize::from(score.predicted == data.choice(i));
        log_sum += score.log_probability;
        brier_sum += score.brier;
    }
    let rmse = truth.map(|t| rmse(params, t)).transpose()?;
    Ok(MetricReport {
        hit_rate: hits as f64 / n as f64,
        log_score: log_sum / n as f64,
        brier_score: brier_sum / n as f64,
        rmse,
        sample_tag: options.sample_tag,
    })
}

/// Deterministic 80/20 split of `0..n` under the run seed.
///
/// Indices are shuffled on their own stream, the first 80% become the
/// training set and the rest the test set; both halves are returned in
/// ascending order.
pub fn train_test_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::keyed(seed, StreamDomain::Split, 0, 0);
    rng.shuffle(&mut order);
    let test_len = ((n as f64) * TEST_FRACTION).round() as usize;
    let train_len = n - test_len;
    let mut train = order[..train_len].to_vec();
    let mut test = order[train_len..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// A bootstrap replicate that failed to fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapFailure {
    /// Replicate index in `0..replicates`.
    pub replicate: usize,
    /// Rendered fitting error.
    pub message: String,
}

/// Bootstrap sampling distribution of the identified parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Successful replicate estimates, in replicate order.
    pub replicates: Vec<ModelParams>,
    /// Replicates whose fit failed, excluded from the summary.
    pub failures: Vec<BootstrapFailure>,
    /// Per-parameter mean of the identified vectors.
    pub mean: Vec<f64>,
    /// Per-parameter standard deviation (unbiased) of the identified
    /// vectors.
    pub sd: Vec<f64>,
    /// Wall-clock seconds for the whole bootstrap.
    pub seconds: f64,
}

/// Resample indices (with replacement) for one bootstrap replicate.
pub fn bootstrap_indices(n: usize, seed: u64, replicate: usize) -> Vec<usize> {
    let mut rng = RngStream::keyed(seed, StreamDomain::Bootstrap, replicate as u64, 0);
    (0..n).map(|_| rng.below(n)).collect()
}

/// Mean and unbiased standard deviation of the identified vectors.
fn summarize(replicates: &[ModelParams]) -> (Vec<f64>, Vec<f64>) {
    let vectors: Vec<Vec<f64>> = replicates.iter().map(|p| p.identified_vector()).collect();
    let len = vectors[0].len();
    let r = vectors.len() as f64;
    let mut mean = vec![0.0; len];
    for v in &vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / r;
        }
    }
    let mut sd = vec![0.0; len];
    if vectors.len() > 1 {
        for v in &vectors {
            for (s, (x, m)) in sd.iter_mut().zip(v.iter().zip(&mean)) {
                *s += (x - m) * (x - m);
            }
        }
        for s in &mut sd {
            *s = (*s / (r - 1.0)).sqrt();
        }
    }
    (mean, sd)
}

/// Nonparametric bootstrap of the variational estimator.
///
/// Each replicate resamples `n` observations with replacement on its own
/// stream, refits with a replicate-specific training seed, and records the
/// identified parameters. Replicates run in parallel; failures are
/// recorded and excluded from the summary. Errors if fewer than two
/// replicates succeed.
pub fn bootstrap(
    data: &ChoiceDataset,
    scheme: SurrogateScheme,
    config: &TrainConfig,
    replicates: usize,
) -> Result<BootstrapResult, ModelError> {
    if replicates < 2 {
        return Err(ModelError::InvalidParams(format!(
            "bootstrap needs at least 2 replicates, got {replicates}"
        )));
    }
    let started = Instant::now();
    let n = data.n();
    let outcomes: Vec<Result<FitResult, String>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let indices = bootstrap_indices(n, config.seed, r);
            let resampled = data.subset(&indices);
            // Derive an independent training seed so replicates do not
            // share initialization or noise streams.
            let replicate_seed =
                RngStream::keyed(config.seed, StreamDomain::Bootstrap, r as u64, 1).next_u64();
            let replicate_config = TrainConfig {
                seed: replicate_seed,
                ..config.clone()
            };
            fit(&resampled, scheme, &replicate_config).map_err(|e| e.to_string())
        })
        .collect();

    let mut kept = Vec::with_capacity(replicates);
    let mut failures = Vec::new();
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(fit) => kept.push(fit.model_params()),
            Err(message) => failures.push(BootstrapFailure {
                replicate: r,
                message,
            }),
        }
    }
    if kept.len() < 2 {
        return Err(ModelError::InvalidParams(format!(
            "bootstrap: only {} of {replicates} replicates fitted successfully",
            kept.len()
        )));
    }
    let (mean, sd) = summarize(&kept);
    Ok(BootstrapResult {
        replicates: kept,
        failures,
        mean,
        sd,
        seconds: started.elapsed().as_secs_f64(),
    })
}
