//! On-disk formats for every pipeline artifact.
//!
//! Datasets are newline-delimited JSON — one header line carrying the
//! dimensions and provenance, then one record per observation with a
//! 1-based choice index and the flattened row-major design matrix.
//! Configurations, parameter estimates, metric reports, and bootstrap
//! summaries are single JSON documents; loss traces and comparison tables
//! are CSV. All writers are deterministic (struct field order and
//! shortest-round-trip float formatting), so rerunning a command with the
//! same resolved configuration reproduces its outputs byte for byte apart
//! from recorded wall-clock fields.
//!
//! A *run configuration* file has optional sections `sim`, `train`,
//! `gibbs`, and `eval` plus a top-level `seed` and `output` directory.
//! Seeds live at the run level only: resolution copies the one run seed
//! into every section, drawing it from OS entropy (and writing it back
//! into the emitted resolved-config file) when neither the file nor the
//! command line provides one. Unknown keys anywhere in the document are
//! rejected with the offending key named. Every derived artifact embeds
//! the SHA-256 hash of the resolved configuration it was produced under.

use crate::encoder::EncoderConfig;
use crate::eval::{BootstrapResult, MetricReport};
use crate::gibbs::{GibbsConfig, PosteriorDraws, TruncationCounters};
use crate::matrix::Matrix;
use crate::model::{ChoiceDataset, ModelError, ModelParams};
use crate::sim::{DesignLayout, SimConfig};
use crate::surrogate::SurrogateScheme;
use crate::train::{FitResult, LossTrace, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

/// Conventional file names inside an output directory.
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const TRUTH_FILE: &str = "truth.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";
pub const BOOTSTRAP_FILE: &str = "bootstrap.json";
pub const COMPARE_FILE: &str = "compare.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

/// Errors from reading or writing pipeline artifacts.
#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    /// A malformed line in a record-oriented file.
    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },
    /// A malformed document-level file.
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    /// An invalid configuration (bad key, bad value, bad combination).
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl FileError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        FileError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn record(path: &Path, line: usize, message: impl Into<String>) -> Self {
        FileError::Record {
            path: path.display().to_string(),
            line,
            message: message.into(),
        }
    }

    fn format(path: &Path, message: impl Into<String>) -> Self {
        FileError::Format {
            path: path.display().to_string(),
            message: message.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// Datasets (JSON lines)
// ---------------------------------------------------------------------------

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub layout: String,
    pub seed: u64,
    /// SHA-256 of the resolved configuration the dataset was produced
    /// under; absent on hand-built files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
}

/// One observation line: 1-based choice and flattened d×p design.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    y: usize,
    #[serde(rename = "X")]
    x: Vec<f64>,
}

#[derive(Serialize)]
struct DatasetRecordRef<'a> {
    y: usize,
    #[serde(rename = "X")]
    x: &'a [f64],
}

/// Writes a dataset as JSON lines; `config_hash`, when given, is embedded
/// in the header.
pub fn write_dataset(
    path: &Path,
    data: &ChoiceDataset,
    config_hash: Option<&str>,
) -> Result<(), FileError> {
    let file = File::create(path).map_err(|e| FileError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = DatasetHeader {
        n: data.n(),
        d: data.d(),
        p: data.p(),
        layout: data.layout.clone(),
        seed: data.seed,
        config: config_hash.map(str::to_string),
    };
    let mut write_line = |value: String| -> Result<(), FileError> {
        out.write_all(value.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| FileError::io(path, e))
    };
    write_line(serde_json::to_string(&header).expect("header serializes"))?;
    for i in 0..data.n() {
        let record = DatasetRecordRef {
            y: data.choice(i) + 1,
            x: data.design_slice(i),
        };
        write_line(serde_json::to_string(&record).expect("record serializes"))?;
    }
    Ok(())
}

/// Reads a dataset written by [`write_dataset`] (or by hand in the same
/// format), validating dimensions line by line.
pub fn read_dataset(path: &Path) -> Result<(ChoiceDataset, DatasetHeader), FileError> {
    let file = File::open(path).map_err(|e| FileError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, first) = lines
        .next()
        .ok_or_else(|| FileError::format(path, "empty file; expected a header line"))?;
    let first = first.map_err(|e| FileError::io(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&first)
        .map_err(|e| FileError::record(path, 1, format!("bad header: {e}")))?;
    if header.d < 2 || header.p < 1 || header.n < 1 {
        return Err(FileError::record(
            path,
            1,
            format!(
                "header needs n >= 1, d >= 2, p >= 1, got n={}, d={}, p={}",
                header.n, header.d, header.p
            ),
        ));
    }

    let mut choices = Vec::with_capacity(header.n);
    let mut designs = Vec::with_capacity(header.n * header.d * header.p);
    for (index, line) in lines {
        let line_no = index + 1;
        let line = line.map_err(|e| FileError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if choices.len() == header.n {
            return Err(FileError::record(
                path,
                line_no,
                format!("found more than the {} records announced in the header", header.n),
            ));
        }
        let record: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| FileError::record(path, line_no, format!("bad record: {e}")))?;
        if record.y == 0 || record.y > header.d {
            return Err(FileError::record(
                path,
                line_no,
                format!("choice index {} outside 1..={}", record.y, header.d),
            ));
        }
        let expected = header.d * header.p;
        if record.x.len() != expected {
            return Err(FileError::record(
                path,
                line_no,
                format!("design has {} entries, expected d*p = {expected}", record.x.len()),
            ));
        }
        choices.push(record.y - 1);
        designs.extend_from_slice(&record.x);
    }
    if choices.len() != header.n {
        return Err(FileError::format(
            path,
            format!("header announces {} records, found {}", header.n, choices.len()),
        ));
    }
    let mut data = ChoiceDataset::new(header.d, header.p, choices, designs)?;
    data.layout = header.layout.clone();
    data.seed = header.seed;
    Ok((data, header))
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// `sim` section: what to simulate. The seed comes from the run level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub n: usize,
    pub d: usize,
    pub layout: DesignLayout,
    /// Explicit generating taste vector (must be paired with
    /// `true_delta_sigma`); omitted values fall back to the layout default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_a: Option<Vec<f64>>,
    /// Explicit generating covariance as nested rows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_delta_sigma: Option<Vec<Vec<f64>>>,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            n: 5000,
            d: 3,
            layout: DesignLayout::Paper3Alt,
            true_a: None,
            true_delta_sigma: None,
        }
    }
}

impl SimSection {
    /// Runtime simulation settings under the given run seed.
    pub fn to_sim_config(&self, seed: u64) -> Result<SimConfig, FileError> {
        let true_delta_sigma = match &self.true_delta_sigma {
            None => None,
            Some(rows) => {
                let k = rows.len();
                let mut flat = Vec::with_capacity(k * k);
                for row in rows {
                    if row.len() != k {
                        return Err(FileError::Config(format!(
                            "sim.true_delta_sigma must be square; row has {} entries, expected {k}",
                            row.len()
                        )));
                    }
                    flat.extend_from_slice(row);
                }
                Some(Matrix::from_vec(k, k, flat).map_err(|e| {
                    FileError::Config(format!("sim.true_delta_sigma: {e}"))
                })?)
            }
        };
        Ok(SimConfig {
            n: self.n,
            d: self.d,
            layout: self.layout,
            seed,
            true_a: self.true_a.clone(),
            true_delta_sigma,
        })
    }
}

/// `train` section: [`TrainConfig`] without its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utility_samples: Option<usize>,
    pub max_epochs: usize,
    pub window: usize,
    pub tolerance: f64,
    pub encoder: EncoderConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainConfig::default().into()
    }
}

impl From<TrainConfig> for TrainSection {
    fn from(c: TrainConfig) -> Self {
        TrainSection {
            learning_rate: c.learning_rate,
            beta_start: c.beta_start,
            beta_end: c.beta_end,
            batch_size: c.batch_size,
            utility_samples: c.utility_samples,
            max_epochs: c.max_epochs,
            window: c.window,
            tolerance: c.tolerance,
            encoder: c.encoder,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            batch_size: self.batch_size,
            utility_samples: self.utility_samples,
            max_epochs: self.max_epochs,
            window: self.window,
            tolerance: self.tolerance,
            seed,
            encoder: self.encoder,
        }
    }
}

/// `gibbs` section: [`GibbsConfig`] without its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsSection {
    pub iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub prior_precision: f64,
}

impl Default for GibbsSection {
    fn default() -> Self {
        GibbsConfig::default().into()
    }
}

impl From<GibbsConfig> for GibbsSection {
    fn from(c: GibbsConfig) -> Self {
        GibbsSection {
            iterations: c.iterations,
            burn_in: c.burn_in,
            thinning: c.thinning,
            prior_precision: c.prior_precision,
        }
    }
}

impl GibbsSection {
    pub fn to_gibbs_config(&self, seed: u64) -> GibbsConfig {
        GibbsConfig {
            iterations: self.iterations,
            burn_in: self.burn_in,
            thinning: self.thinning,
            prior_precision: self.prior_precision,
            seed,
        }
    }
}

/// `eval` section: metric and bootstrap settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Monte-Carlo draws per probability estimate.
    pub draws: usize,
    /// Bootstrap replicate count.
    pub bootstrap_replicates: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            draws: 10_000,
            bootstrap_replicates: 20,
        }
    }
}

/// A run-configuration file, before seed and output resolution.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run seed; drawn from OS entropy at resolution when absent here and
    /// on the command line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output directory; default `mnp-out`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    pub sim: SimSection,
    pub train: TrainSection,
    pub gibbs: GibbsSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Resolves seed and output directory. Precedence: command line, then
    /// file, then entropy (seed) / `mnp-out` (output). The run seed is
    /// copied into every section.
    pub fn resolve(&self, cli_seed: Option<u64>, cli_output: Option<&str>) -> ResolvedConfig {
        let seed = cli_seed
            .or(self.seed)
            .unwrap_or_else(|| rand::random::<u64>());
        let output = cli_output
            .map(str::to_string)
            .or_else(|| self.output.clone())
            .unwrap_or_else(|| "mnp-out".to_string());
        ResolvedConfig {
            seed,
            output,
            sim: self.sim.clone(),
            train: self.train.to_train_config(seed),
            gibbs: self.gibbs.to_gibbs_config(seed),
            eval: self.eval,
        }
    }
}

/// A fully resolved configuration: one explicit seed everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub output: String,
    pub sim: SimSection,
    pub train: TrainConfig,
    pub gibbs: GibbsConfig,
    pub eval: EvalSection,
}

impl ResolvedConfig {
    /// Runtime simulation settings.
    pub fn sim_config(&self) -> Result<SimConfig, FileError> {
        self.sim.to_sim_config(self.seed)
    }

    /// Canonical compact JSON of the configuration *identity*: every
    /// field except the output directory (relocating artifacts does not
    /// change the experiment), with keys alphabetized.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("resolved config serializes");
        value
            .as_object_mut()
            .expect("config is an object")
            .remove("output");
        value.to_string()
    }

    /// SHA-256 of [`ResolvedConfig::canonical_json`], lowercase hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        let mut hex = String::with_capacity(64);
        for byte in digest {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}

/// Reads a run-configuration file into a JSON value, so command-line
/// overrides can be applied before typed deserialization.
pub fn read_json_value(path: &Path) -> Result<serde_json::Value, FileError> {
    let text = std::fs::read_to_string(path).map_err(|e| FileError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FileError::format(path, format!("bad JSON: {e}")))
}

/// Typed deserialization of a (possibly overridden) config value; unknown
/// keys are rejected with the key named in the error.
pub fn run_config_from_value(value: serde_json::Value) -> Result<RunConfig, FileError> {
    serde_json::from_value(value).map_err(|e| FileError::Config(e.to_string()))
}

/// Applies one `--key=value` override to a JSON document. `dotted` is a
/// dot-separated path (`train.max_epochs`); the value is parsed as JSON
/// when possible and kept as a string otherwise.
pub fn apply_override(
    document: &mut serde_json::Value,
    dotted: &str,
    raw: &str,
) -> Result<(), FileError> {
    if dotted.is_empty() || dotted.split('.').any(str::is_empty) {
        return Err(FileError::Config(format!("bad override key `{dotted}`")));
    }
    let mut cursor = document;
    let segments: Vec<&str> = dotted.split('.').collect();
    for segment in &segments[..segments.len() - 1] {
        if !cursor.is_object() {
            return Err(FileError::Config(format!(
                "override `{dotted}`: `{segment}` is not reachable through an object"
            )));
        }
        cursor = cursor
            .as_object_mut()
            .expect("checked object")
            .entry(segment.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let object = cursor.as_object_mut().ok_or_else(|| {
        FileError::Config(format!(
            "override `{dotted}`: parent of `{}` is not an object",
            segments[segments.len() - 1]
        ))
    })?;
    let value = serde_json::from_str::<serde_json::Value>(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    object.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

// ---------------------------------------------------------------------------
// JSON documents
// ---------------------------------------------------------------------------

/// Writes a document as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FileError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| FileError::format(path, format!("serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| FileError::io(path, e))
}

/// Reads a JSON document.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FileError> {
    let text = std::fs::read_to_string(path).map_err(|e| FileError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FileError::format(path, e.to_string()))
}

/// Estimation method behind a fit document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Cvi,
    Mcmc,
}

impl std::fmt::Display for FitMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitMethod::Cvi => write!(f, "cvi"),
            FitMethod::Mcmc => write!(f, "mcmc"),
        }
    }
}

/// A fitted model on disk: identified point estimates plus enough context
/// to reload, evaluate, and compare it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDocument {
    pub method: FitMethod,
    pub n: usize,
    pub d: usize,
    pub p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SurrogateScheme>,
    /// Taste estimates on the identified scale.
    pub a: Vec<f64>,
    /// Trace-normalized covariance estimate.
    pub delta_sigma_bar: Matrix,
    /// Trained encoder weights (variational fits only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_weights: Option<Vec<f64>>,
    /// In-sample metrics computed at fit time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    /// Loss-trace CSV, relative to this document's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_file: Option<String>,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs_run: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_run: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    /// Utility draws whose decoded probability hit the floor (variational).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamped_draws: Option<usize>,
    /// Retained posterior draws (MCMC).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained_draws: Option<usize>,
    /// Retained-sweep latent vectors failing to reproduce their choice
    /// (MCMC).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_violations: Option<usize>,
    /// Truncated-normal numerical fallbacks (MCMC).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<TruncationCounters>,
    pub config_sha256: String,
    pub config: ResolvedConfig,
}

impl FitDocument {
    /// Packages a variational fit.
    pub fn from_cvi(
        fit: &FitResult,
        n: usize,
        resolved: &ResolvedConfig,
        metrics: Option<MetricReport>,
        trace_file: Option<String>,
    ) -> Self {
        let params = fit.model_params();
        FitDocument {
            method: FitMethod::Cvi,
            n,
            d: params.d(),
            p: params.p(),
            scheme: Some(fit.scheme),
            a: params.a.clone(),
            delta_sigma_bar: params.delta_sigma_bar(),
            encoder_weights: Some(fit.params.xi().to_vec()),
            metrics,
            trace_file,
            seconds: fit.seconds,
            epochs_run: Some(fit.epochs_run),
            steps_run: Some(fit.steps_run),
            converged: Some(fit.converged),
            clamped_draws: Some(fit.clamped_draws),
            retained_draws: None,
            latent_violations: None,
            truncation: None,
            config_sha256: resolved.hash(),
            config: resolved.clone(),
        }
    }

    /// Packages a Gibbs posterior.
    pub fn from_mcmc(
        draws: &PosteriorDraws,
        n: usize,
        resolved: &ResolvedConfig,
        metrics: Option<MetricReport>,
    ) -> Result<Self, ModelError> {
        let params = draws.model_params()?;
        Ok(FitDocument {
            method: FitMethod::Mcmc,
            n,
            d: params.d(),
            p: params.p(),
            scheme: None,
            a: params.a.clone(),
            delta_sigma_bar: params.delta_sigma_bar(),
            encoder_weights: None,
            metrics,
            trace_file: None,
            seconds: draws.seconds,
            epochs_run: None,
            steps_run: None,
            converged: None,
            clamped_draws: None,
            retained_draws: Some(draws.len()),
            latent_violations: Some(draws.latent_violations),
            truncation: Some(draws.truncation),
            config_sha256: resolved.hash(),
            config: resolved.clone(),
        })
    }

    /// Reconstructs the identified parameters.
    pub fn params(&self) -> Result<ModelParams, ModelError> {
        ModelParams::from_covariance(self.d, self.a.clone(), &self.delta_sigma_bar)
    }

    /// Label used in file names and the comparison table.
    pub fn tag(&self) -> String {
        match (self.method, self.scheme) {
            (FitMethod::Cvi, Some(scheme)) => scheme.name().to_string(),
            (FitMethod::Cvi, None) => "cvi".to_string(),
            (FitMethod::Mcmc, _) => "mcmc".to_string(),
        }
    }
}

/// Conventional fit-document file name for a tag (`fit-combined.json`,
/// `fit-mcmc.json`, …).
pub fn fit_file_name(tag: &str) -> String {
    format!("fit-{tag}.json")
}

/// Conventional loss-trace file name for a tag.
pub fn trace_file_name(tag: &str) -> String {
    format!("trace-{tag}.csv")
}

/// Conventional metrics file name for a tag.
pub fn metrics_file_name(tag: &str) -> String {
    format!("metrics-{tag}.json")
}

/// Ground-truth parameters written next to a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthDocument {
    pub d: usize,
    pub p: usize,
    pub a: Vec<f64>,
    pub delta_sigma_bar: Matrix,
    pub config_sha256: String,
}

impl TruthDocument {
    pub fn new(params: &ModelParams, config_hash: &str) -> Self {
        TruthDocument {
            d: params.d(),
            p: params.p(),
            a: params.a.clone(),
            delta_sigma_bar: params.delta_sigma_bar(),
            config_sha256: config_hash.to_string(),
        }
    }

    /// Reconstructs the identified parameters.
    pub fn params(&self) -> Result<ModelParams, ModelError> {
        let params = ModelParams::from_covariance(self.d, self.a.clone(), &self.delta_sigma_bar)?;
        if params.p() != self.p {
            return Err(ModelError::InvalidParams(format!(
                "truth document declares p = {}, parameters imply p = {}",
                self.p,
                params.p()
            )));
        }
        Ok(params)
    }
}

/// Metric reports for one fit on one dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsDocument {
    pub method: FitMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SurrogateScheme>,
    pub in_sample: MetricReport,
    pub out_of_sample: MetricReport,
    pub config_sha256: String,
}

/// Bootstrap output document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapDocument {
    pub scheme: SurrogateScheme,
    pub replicates_requested: usize,
    pub result: BootstrapResult,
    pub config_sha256: String,
}

/// Written next to other outputs when a command fails numerically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsDocument {
    pub command: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
}

// ---------------------------------------------------------------------------
// CSV outputs
// ---------------------------------------------------------------------------

/// Writes the loss trace as CSV (`step,epoch,l1,l2,total,beta,seconds`).
pub fn write_trace_csv(path: &Path, trace: &LossTrace) -> Result<(), FileError> {
    let file = File::create(path).map_err(|e| FileError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |line: String| -> Result<(), FileError> {
        out.write_all(line.as_bytes()).map_err(|e| FileError::io(path, e))
    };
    write("step,epoch,l1,l2,total,beta,seconds\n".to_string())?;
    for r in &trace.records {
        write(format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.epoch, r.l1, r.l2, r.total, r.beta, r.seconds
        ))?;
    }
    Ok(())
}

/// Builds the side-by-side comparison table (CSV text) for two or more fit
/// documents against one ground truth: hit rate, log score, Brier score,
/// RMSE against the truth, and wall-clock minutes, one row per method.
///
/// Refuses inputs whose `(n, d, p)` headers disagree, and fits that carry
/// no embedded metrics.
pub fn compare_table(fits: &[FitDocument], truth: &ModelParams) -> Result<String, FileError> {
    if fits.len() < 2 {
        return Err(FileError::Config(format!(
            "compare needs at least 2 fit documents, got {}",
            fits.len()
        )));
    }
    let (n, d, p) = (fits[0].n, fits[0].d, fits[0].p);
    for fit in fits {
        if (fit.n, fit.d, fit.p) != (n, d, p) {
            return Err(FileError::Config(format!(
                "fit documents disagree on dimensions: ({n}, {d}, {p}) vs ({}, {}, {})",
                fit.n, fit.d, fit.p
            )));
        }
    }
    if truth.d() != d || truth.p() != p {
        return Err(FileError::Config(format!(
            "truth has (d={}, p={}), fits have (d={d}, p={p})",
            truth.d(),
            truth.p()
        )));
    }
    let mut out = String::from("method,scheme,hit_rate,log_score,brier_score,rmse,minutes\n");
    for fit in fits {
        let metrics = fit.metrics.as_ref().ok_or_else(|| {
            FileError::Config(format!(
                "fit document `{}` carries no embedded metrics",
                fit.tag()
            ))
        })?;
        let rmse = crate::eval::rmse(&fit.params()?, truth)?;
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            fit.method,
            fit.scheme.map(|s| s.name()).unwrap_or("-"),
            metrics.hit_rate,
            metrics.log_score,
            metrics.brier_score,
            rmse,
            fit.seconds / 60.0,
        ));
    }
    Ok(out)
}
