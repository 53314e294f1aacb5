//! Command-line pipeline for multinomial probit choice models:
//! `simulate` → `fit` → `evaluate` → `bootstrap` → `mcmc` → `compare`.
//!
//! Every subcommand resolves one configuration (file + dotted overrides +
//! flags), writes it back as `resolved-config.json` in the output
//! directory, and stamps each artifact it produces with the SHA-256 of
//! that resolved configuration. All randomness flows from the single
//! resolved run seed, so rerunning a command reproduces its outputs byte
//! for byte apart from recorded wall-clock fields.
//!
//! Exit codes: 0 success; 2 configuration error (the message names the
//! offending key); 3 data error (missing or malformed input files);
//! 4 numerical failure, with a `diagnostics.json` written next to the
//! other outputs.

use clap::{Args, Parser, Subcommand};
use mnp_vi::eval::{self, MetricOptions, SampleTag};
use mnp_vi::files::{
    self, DiagnosticsDocument, FileError, FitDocument, MetricsDocument, ResolvedConfig,
    TruthDocument,
};
use mnp_vi::gibbs;
use mnp_vi::model::{ChoiceDataset, ModelError, ModelParams};
use mnp_vi::sim::simulate;
use mnp_vi::surrogate::SurrogateScheme;
use mnp_vi::train::{self, TrainError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mnp-cli",
    version,
    about = "Simulate, calibrate, and benchmark multinomial probit choice models",
    after_help = "Any configuration key can be overridden per invocation, either with\n\
                  `--override train.max_epochs=3` or the shorthand `--train.max_epochs=3`\n\
                  (long flags whose name contains a dot are treated as overrides)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every configuration-driven subcommand.
#[derive(Args)]
struct Common {
    /// Run-configuration file (JSON); built-in defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing); overrides the config file.
    #[arg(long)]
    out: Option<String>,
    /// Run seed; overrides the config file. Drawn from OS entropy when
    /// neither provides one, and always recorded in resolved-config.json.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core). Env var MNP_THREADS is the
    /// fallback when this flag is absent.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it with its generating truth.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Calibrate the variational model on the 80% training split.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Argmax surrogate: ste, gumbel, or combined.
        #[arg(long, default_value = "combined")]
        scheme: SurrogateScheme,
    },
    /// Score a stored fit in and out of sample.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Which stored fit to score when --fit is absent.
        #[arg(long, default_value = "combined")]
        scheme: SurrogateScheme,
        /// Explicit fit document; defaults to fit-<scheme>.json in the
        /// output directory (point at fit-mcmc.json for the sampler).
        #[arg(long)]
        fit: Option<PathBuf>,
    },
    /// Refit on bootstrap resamples of the full dataset and summarize the
    /// spread of the estimates.
    Bootstrap {
        #[command(flatten)]
        common: Common,
        /// Argmax surrogate used for every replicate.
        #[arg(long, default_value = "combined")]
        scheme: SurrogateScheme,
    },
    /// Fit the Gibbs-sampler baseline on the 80% training split.
    Mcmc {
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate two or more stored fits against a ground truth (CSV).
    Compare {
        /// Fit documents to compare.
        #[arg(required = true, num_args = 2..)]
        fits: Vec<PathBuf>,
        /// Ground-truth parameter file (as written by simulate).
        #[arg(long)]
        truth: PathBuf,
        /// Directory for compare.csv; defaults to the first fit's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A command failure with its process exit code.
enum CliError {
    /// Exit 2: bad flag, bad key, bad value.
    Config(String),
    /// Exit 3: missing or malformed input file.
    Data(String),
    /// Exit 4: the computation itself failed.
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<FileError> for CliError {
    fn from(e: FileError) -> Self {
        match e {
            FileError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let (plain, overrides) = match extract_overrides(argv) {
        Ok(split) => split,
        Err(e) => return fail(e),
    };
    let cli = Cli::parse_from(plain);
    let threads = match &cli.command {
        Command::Simulate { common }
        | Command::Fit { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Bootstrap { common, .. }
        | Command::Mcmc { common } => common.threads,
        Command::Compare { .. } => None,
    };
    if let Err(e) = configure_threads(threads) {
        return fail(e);
    }
    let result = match cli.command {
        Command::Simulate { common } => {
            load_context(&common, &overrides).and_then(|ctx| cmd_simulate(&ctx))
        }
        Command::Fit { common, scheme } => {
            load_context(&common, &overrides).and_then(|ctx| cmd_fit(&ctx, scheme))
        }
        Command::Evaluate {
            common,
            scheme,
            fit,
        } => load_context(&common, &overrides).and_then(|ctx| cmd_evaluate(&ctx, scheme, fit)),
        Command::Bootstrap { common, scheme } => {
            load_context(&common, &overrides).and_then(|ctx| cmd_bootstrap(&ctx, scheme))
        }
        Command::Mcmc { common } => {
            load_context(&common, &overrides).and_then(|ctx| cmd_mcmc(&ctx))
        }
        Command::Compare { fits, truth, out } => cmd_compare(&fits, &truth, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("error: {}", e.message());
    ExitCode::from(e.exit_code())
}

/// Splits argv into clap-visible arguments and configuration overrides.
///
/// Overrides come in two spellings: `--override key=value` (or
/// `--override=key=value`) and the shorthand `--train.max_epochs=3` — any
/// long flag whose name contains a dot. Scanning stops at a bare `--`.
fn extract_overrides(argv: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut plain = Vec::with_capacity(argv.len());
    let mut overrides = Vec::new();
    let mut rest = argv.into_iter();
    while let Some(arg) = rest.next() {
        if arg == "--" {
            plain.push(arg);
            plain.extend(rest);
            break;
        }
        let pair = if arg == "--override" {
            Some(rest.next().ok_or_else(|| {
                CliError::Config("--override expects key=value".to_string())
            })?)
        } else if let Some(tail) = arg.strip_prefix("--override=") {
            Some(tail.to_string())
        } else if let Some(body) = arg.strip_prefix("--") {
            match body.split_once('=') {
                Some((name, _)) if name.contains('.') => Some(body.to_string()),
                _ => None,
            }
        } else {
            None
        };
        match pair {
            Some(pair) => {
                let (key, value) = pair.split_once('=').ok_or_else(|| {
                    CliError::Config(format!("override `{pair}` is not of the form key=value"))
                })?;
                overrides.push((key.to_string(), value.to_string()));
            }
            None => plain.push(arg),
        }
    }
    Ok((plain, overrides))
}

/// Installs the global worker pool. `--threads` wins; MNP_THREADS is the
/// fallback; otherwise rayon's default (one worker per core) stands.
fn configure_threads(flag: Option<usize>) -> Result<(), CliError> {
    let threads = match flag {
        Some(t) => Some(t),
        None => match std::env::var("MNP_THREADS") {
            Ok(raw) => Some(raw.parse::<usize>().map_err(|_| {
                CliError::Config(format!("MNP_THREADS must be a thread count, got `{raw}`"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// A resolved configuration plus the directory its artifacts land in.
struct Context {
    out_dir: PathBuf,
    resolved: ResolvedConfig,
    hash: String,
}

/// Reads the config file (if any), applies overrides, resolves seed and
/// output directory, and creates the directory.
fn load_context(common: &Common, overrides: &[(String, String)]) -> Result<Context, CliError> {
    let mut document = match &common.config {
        Some(path) => files::read_json_value(path)?,
        None => serde_json::json!({}),
    };
    for (key, raw) in overrides {
        files::apply_override(&mut document, key, raw)?;
    }
    let config = files::run_config_from_value(document)?;
    let resolved = config.resolve(common.seed, common.out.as_deref());
    let out_dir = PathBuf::from(&resolved.output);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?;
    let hash = resolved.hash();
    Ok(Context {
        out_dir,
        resolved,
        hash,
    })
}

impl Context {
    /// Writes the resolved configuration (with its seed made explicit) so
    /// the run is reproducible from the output directory alone.
    fn write_resolved(&self) -> Result<(), CliError> {
        files::write_json(
            &self.out_dir.join(files::RESOLVED_CONFIG_FILE),
            &self.resolved,
        )?;
        Ok(())
    }

    fn read_dataset(&self) -> Result<ChoiceDataset, CliError> {
        let (data, _header) = files::read_dataset(&self.out_dir.join(files::DATASET_FILE))?;
        Ok(data)
    }

    /// The simulated truth, when this output directory has one.
    fn read_truth(&self) -> Result<Option<ModelParams>, CliError> {
        let path = self.out_dir.join(files::TRUTH_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let doc: TruthDocument = files::read_json(&path)?;
        Ok(Some(doc.params().map_err(|e| CliError::Data(e.to_string()))?))
    }

    fn metric_options(&self, sample_tag: SampleTag) -> MetricOptions {
        MetricOptions {
            draws: self.resolved.eval.draws,
            seed: self.resolved.seed,
            sample_tag,
        }
    }
}

/// Records a numerical failure in `diagnostics.json` and returns the
/// exit-4 error.
fn numerical_failure(ctx: &Context, command: &str, message: String) -> CliError {
    let doc = DiagnosticsDocument {
        command: command.to_string(),
        message: message.clone(),
        config_sha256: Some(ctx.hash.clone()),
    };
    // Best effort: the failure itself is what gets reported.
    let _ = files::write_json(&ctx.out_dir.join(files::DIAGNOSTICS_FILE), &doc);
    CliError::Numerical(message)
}

/// Classifies a model-layer error: invalid inputs are data errors, while
/// failures inside the computation (factorization breakdowns) are
/// numerical and leave diagnostics behind.
fn map_model_error(ctx: &Context, command: &str, e: ModelError) -> CliError {
    match e {
        ModelError::InvalidDataset(_) | ModelError::InvalidParams(_) => {
            CliError::Data(e.to_string())
        }
        _ => numerical_failure(ctx, command, e.to_string()),
    }
}

fn cmd_simulate(ctx: &Context) -> Result<(), CliError> {
    let sim = ctx.resolved.sim_config()?;
    let (data, truth) =
        simulate(&sim).map_err(|e| CliError::Config(format!("sim: {e}")))?;
    ctx.write_resolved()?;
    files::write_dataset(&ctx.out_dir.join(files::DATASET_FILE), &data, Some(&ctx.hash))?;
    files::write_json(
        &ctx.out_dir.join(files::TRUTH_FILE),
        &TruthDocument::new(&truth, &ctx.hash),
    )?;
    println!(
        "simulated n={} (d={}, p={}, layout={}, seed={}) -> {}",
        data.n(),
        data.d(),
        data.p(),
        data.layout,
        data.seed,
        ctx.out_dir.display()
    );
    Ok(())
}

fn cmd_fit(ctx: &Context, scheme: SurrogateScheme) -> Result<(), CliError> {
    let data = ctx.read_dataset()?;
    let (train_indices, _) = eval::train_test_split(data.n(), ctx.resolved.seed);
    let train_data = data.subset(&train_indices);
    let result = train::fit(&train_data, scheme, &ctx.resolved.train).map_err(|e| match e {
        TrainError::Config(m) => CliError::Config(m),
        TrainError::Numerical { .. } => numerical_failure(ctx, "fit", e.to_string()),
    })?;
    let params = result.model_params();
    let truth = ctx.read_truth()?;
    let report = eval::metrics(
        &train_data,
        &params,
        truth.as_ref(),
        &ctx.metric_options(SampleTag::InSample),
    )
    .map_err(|e| map_model_error(ctx, "fit", e))?;

    let tag = scheme.name();
    let trace_name = files::trace_file_name(tag);
    ctx.write_resolved()?;
    files::write_trace_csv(&ctx.out_dir.join(&trace_name), &result.trace)?;
    let document = FitDocument::from_cvi(
        &result,
        data.n(),
        &ctx.resolved,
        Some(report.clone()),
        Some(trace_name),
    );
    files::write_json(&ctx.out_dir.join(files::fit_file_name(tag)), &document)?;
    println!(
        "fit {tag}: {} epochs ({} steps, converged={}), {:.1} s, in-sample hit_rate {:.4} -> {}",
        result.epochs_run,
        result.steps_run,
        result.converged,
        result.seconds,
        report.hit_rate,
        ctx.out_dir.join(files::fit_file_name(tag)).display()
    );
    Ok(())
}

fn cmd_evaluate(
    ctx: &Context,
    scheme: SurrogateScheme,
    fit_path: Option<PathBuf>,
) -> Result<(), CliError> {
    let data = ctx.read_dataset()?;
    let path =
        fit_path.unwrap_or_else(|| ctx.out_dir.join(files::fit_file_name(scheme.name())));
    let document: FitDocument = files::read_json(&path)?;
    if (document.n, document.d, document.p) != (data.n(), data.d(), data.p()) {
        return Err(CliError::Data(format!(
            "{}: fit was produced on (n={}, d={}, p={}), dataset has (n={}, d={}, p={})",
            path.display(),
            document.n,
            document.d,
            document.p,
            data.n(),
            data.d(),
            data.p()
        )));
    }
    let params = document
        .params()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let truth = ctx.read_truth()?;
    // The fit's own seed determines the split, so "in-sample" is exactly
    // the portion the stored fit was trained on.
    let (train_indices, test_indices) =
        eval::train_test_split(data.n(), document.config.seed);
    let in_sample = eval::metrics(
        &data.subset(&train_indices),
        &params,
        truth.as_ref(),
        &ctx.metric_options(SampleTag::InSample),
    )
    .map_err(|e| map_model_error(ctx, "evaluate", e))?;
    let out_of_sample = eval::metrics(
        &data.subset(&test_indices),
        &params,
        truth.as_ref(),
        &ctx.metric_options(SampleTag::OutOfSample),
    )
    .map_err(|e| map_model_error(ctx, "evaluate", e))?;

    let tag = document.tag();
    let metrics_document = MetricsDocument {
        method: document.method,
        scheme: document.scheme,
        in_sample,
        out_of_sample,
        config_sha256: ctx.hash.clone(),
    };
    ctx.write_resolved()?;
    let out_path = ctx.out_dir.join(files::metrics_file_name(&tag));
    files::write_json(&out_path, &metrics_document)?;
    print!(
        "{}{}",
        metrics_document.in_sample.flat_text(),
        metrics_document.out_of_sample.flat_text()
    );
    println!("-> {}", out_path.display());
    Ok(())
}

fn cmd_bootstrap(ctx: &Context, scheme: SurrogateScheme) -> Result<(), CliError> {
    let data = ctx.read_dataset()?;
    let replicates = ctx.resolved.eval.bootstrap_replicates;
    if replicates < 2 {
        return Err(CliError::Config(format!(
            "eval.bootstrap_replicates must be at least 2, got {replicates}"
        )));
    }
    let result = eval::bootstrap(&data, scheme, &ctx.resolved.train, replicates)
        .map_err(|e| numerical_failure(ctx, "bootstrap", e.to_string()))?;
    let document = files::BootstrapDocument {
        scheme,
        replicates_requested: replicates,
        result,
        config_sha256: ctx.hash.clone(),
    };
    ctx.write_resolved()?;
    files::write_json(&ctx.out_dir.join(files::BOOTSTRAP_FILE), &document)?;
    println!(
        "bootstrap {}: {}/{} replicates succeeded, {:.1} s -> {}",
        scheme.name(),
        document.result.replicates.len(),
        replicates,
        document.result.seconds,
        ctx.out_dir.join(files::BOOTSTRAP_FILE).display()
    );
    Ok(())
}

fn cmd_mcmc(ctx: &Context) -> Result<(), CliError> {
    let data = ctx.read_dataset()?;
    ctx.resolved
        .gibbs
        .validate(data.d())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let (train_indices, _) = eval::train_test_split(data.n(), ctx.resolved.seed);
    let train_data = data.subset(&train_indices);
    let draws = gibbs::gibbs_fit(&train_data, &ctx.resolved.gibbs)
        .map_err(|e| map_model_error(ctx, "mcmc", e))?;
    let params = draws
        .model_params()
        .map_err(|e| numerical_failure(ctx, "mcmc", e.to_string()))?;
    let truth = ctx.read_truth()?;
    let report = eval::metrics(
        &train_data,
        &params,
        truth.as_ref(),
        &ctx.metric_options(SampleTag::InSample),
    )
    .map_err(|e| map_model_error(ctx, "mcmc", e))?;
    let document = FitDocument::from_mcmc(&draws, data.n(), &ctx.resolved, Some(report.clone()))
        .map_err(|e| numerical_failure(ctx, "mcmc", e.to_string()))?;
    ctx.write_resolved()?;
    let out_path = ctx.out_dir.join(files::fit_file_name("mcmc"));
    files::write_json(&out_path, &document)?;
    println!(
        "mcmc: {} retained draws, {:.1} s, in-sample hit_rate {:.4} -> {}",
        draws.len(),
        draws.seconds,
        report.hit_rate,
        out_path.display()
    );
    Ok(())
}

fn cmd_compare(fits: &[PathBuf], truth: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let mut documents = Vec::with_capacity(fits.len());
    for path in fits {
        documents.push(files::read_json::<FitDocument>(path)?);
    }
    let truth_document: TruthDocument = files::read_json(truth)?;
    let truth_params = truth_document
        .params()
        .map_err(|e| CliError::Data(format!("{}: {e}", truth.display())))?;
    // Mismatched or metric-less inputs are a data problem, whatever the
    // library calls them.
    let table = files::compare_table(&documents, &truth_params)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let dir = match out {
        Some(dir) => dir.to_path_buf(),
        None => fits[0]
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let out_path = dir.join(files::COMPARE_FILE);
    std::fs::write(&out_path, &table)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_path.display())))?;
    print!("{table}");
    println!("-> {}", out_path.display());
    Ok(())
}
