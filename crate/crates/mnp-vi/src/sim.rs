//! Synthetic choice data: fill sparse design matrices with standard-uniform
//! draws, push them through a known (a, ΔΣ) truth, and record the argmax
//! choices. Every observation has its own seeded stream, so datasets are
//! byte-identical across runs and the first n rows do not depend on how many
//! more follow.

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::model::{
    difference_design, ChoiceDataset, ModelError, ModelParams, Utilities,
};
use crate::rng::{RngStream, StreamDomain};

/// Sparsity pattern of the per-observation design matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DesignLayout {
    /// The three-alternative benchmark pattern (d=3, p=5): two
    /// alternative-specific attributes spread over the first four columns
    /// plus a shared fifth column carrying the generic parameter.
    #[serde(rename = "paper-3alt")]
    Paper3Alt,
    /// The natural any-d extension (p = d+1): column j is specific to
    /// alternative j, and the last column is dense (generic).
    #[serde(rename = "generic")]
    Generic,
}

impl DesignLayout {
    pub fn name(&self) -> &'static str {
        match self {
            DesignLayout::Paper3Alt => "paper-3alt",
            DesignLayout::Generic => "generic",
        }
    }

    /// Covariate count for a given d.
    pub fn p(&self, d: usize) -> Result<usize, ModelError> {
        match self {
            DesignLayout::Paper3Alt => {
                if d == 3 {
                    Ok(5)
                } else {
                    Err(ModelError::InvalidParams(format!(
                        "the paper-3alt layout is defined for d = 3 only, got d = {d}"
                    )))
                }
            }
            DesignLayout::Generic => {
                if d >= 2 {
                    Ok(d + 1)
                } else {
                    Err(ModelError::InvalidParams("generic layout needs d >= 2".into()))
                }
            }
        }
    }

    /// The (row, col) positions filled with U(0,1) draws, in draw order
    /// (row-major over designated entries).
    pub fn slots(&self, d: usize) -> Result<Vec<(usize, usize)>, ModelError> {
        let p = self.p(d)?;
        match self {
            DesignLayout::Paper3Alt => {
                Ok(vec![(0, 0), (0, 4), (1, 1), (1, 4), (2, 2), (2, 3), (2, 4)])
            }
            DesignLayout::Generic => {
                let mut slots = Vec::with_capacity(2 * d);
                for i in 0..d {
                    slots.push((i, i));
                    slots.push((i, p - 1));
                }
                Ok(slots)
            }
        }
    }
}

impl std::fmt::Display for DesignLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DesignLayout {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper-3alt" => Ok(DesignLayout::Paper3Alt),
            "generic" => Ok(DesignLayout::Generic),
            other => Err(ModelError::InvalidParams(format!("unknown design layout '{other}'"))),
        }
    }
}

/// Simulation settings. Omitted truth falls back to the layout default:
/// the published three-alternative values for [`DesignLayout::Paper3Alt`],
/// or a seed-derived truth for [`DesignLayout::Generic`].
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n: usize,
    pub d: usize,
    pub layout: DesignLayout,
    pub seed: u64,
    pub true_a: Option<Vec<f64>>,
    pub true_delta_sigma: Option<Matrix>,
}

/// The published truth for the three-alternative benchmark.
pub fn paper_truth() -> ModelParams {
    let dsigma =
        Matrix::from_rows(&[&[0.89, 0.31], &[0.31, 1.11]]).expect("valid covariance");
    ModelParams::from_covariance(3, vec![0.6, 0.55, 0.9, -0.25, 0.2], &dsigma)
        .expect("the benchmark covariance is PD")
}

/// Seed-derived truth for layouts without published values: ΔΣ is the
/// trace-normalized Gram matrix of a standard-normal k×k draw and the taste
/// entries are U(−1, 1), all from the dedicated truth stream.
pub fn derived_truth(d: usize, p: usize, seed: u64) -> Result<ModelParams, ModelError> {
    let k = d - 1;
    let mut rng = RngStream::keyed(seed, StreamDomain::Truth, 0, 0);
    let mut g = Matrix::zeros(k, k);
    for v in g.as_mut_slice() {
        *v = rng.standard_normal();
    }
    let gram = g.matmul_transpose_b(&g);
    let dsigma = crate::model::trace_normalize(&gram)?;
    let a: Vec<f64> = (0..p).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    ModelParams::from_covariance(d, a, &dsigma)
}

/// Resolve the ground truth for a config: explicit values are validated
/// (length, PD, trace = d−1), missing ones fall back to the layout default.
pub fn resolve_truth(cfg: &SimConfig) -> Result<ModelParams, ModelError> {
    let p = cfg.layout.p(cfg.d)?;
    let k = cfg.d - 1;
    match (&cfg.true_a, &cfg.true_delta_sigma) {
        (None, None) => match cfg.layout {
            DesignLayout::Paper3Alt => Ok(paper_truth()),
            DesignLayout::Generic => derived_truth(cfg.d, p, cfg.seed),
        },
        (Some(a), Some(dsigma)) => {
            if a.len() != p {
                return Err(ModelError::InvalidParams(format!(
                    "true_a has length {}, layout {} with d = {} needs {p}",
                    a.len(),
                    cfg.layout,
                    cfg.d
                )));
            }
            if (dsigma.rows(), dsigma.cols()) != (k, k) {
                return Err(ModelError::InvalidParams(format!(
                    "true_delta_sigma must be {k}×{k}"
                )));
            }
            let tr = dsigma.trace();
            if (tr - k as f64).abs() > 1e-6 * k as f64 {
                return Err(ModelError::InvalidParams(format!(
                    "true_delta_sigma must have trace {k} (the identified scale), got {tr}"
                )));
            }
            ModelParams::from_covariance(cfg.d, a.clone(), dsigma)
        }
        _ => Err(ModelError::InvalidParams(
            "provide both true_a and true_delta_sigma, or neither".into(),
        )),
    }
}

/// One design matrix with the layout's designated entries drawn U(0,1).
pub fn build_design(
    layout: DesignLayout,
    d: usize,
    rng: &mut RngStream,
) -> Result<Matrix, ModelError> {
    let p = layout.p(d)?;
    let mut x = Matrix::zeros(d, p);
    for (i, j) in layout.slots(d)? {
        x.set(i, j, rng.uniform_in(0.0, 1.0));
    }
    Ok(x)
}

/// One observation: the design, its differenced utilities, and the choice.
/// Per-observation draw order is fixed: design entries first, then the k
/// standard normals behind ε.
fn draw_observation(
    layout: DesignLayout,
    d: usize,
    truth: &ModelParams,
    eps_chol: &Matrix,
    rng: &mut RngStream,
) -> Result<(Matrix, Vec<f64>, usize), ModelError> {
    let k = d - 1;
    let x = build_design(layout, d, rng)?;
    let z: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
    let mut du = difference_design(&x).matvec(&truth.a);
    for i in 0..k {
        for (lij, zj) in eps_chol.row(i).iter().take(i + 1).zip(&z) {
            du[i] += lij * zj;
        }
    }
    let choice = crate::model::choose_index(&Utilities::Differenced(du.clone()), 0.0);
    Ok((x, du, choice))
}

/// Simulate a dataset and return it with the data-generating truth.
pub fn simulate(cfg: &SimConfig) -> Result<(ChoiceDataset, ModelParams), ModelError> {
    if cfg.n == 0 {
        return Err(ModelError::InvalidParams("need at least one observation".into()));
    }
    let p = cfg.layout.p(cfg.d)?;
    let truth = resolve_truth(cfg)?;
    let eps_chol = truth.delta_sigma().cholesky()?;

    let mut choices = Vec::with_capacity(cfg.n);
    let mut designs = Vec::with_capacity(cfg.n * cfg.d * p);
    for i in 0..cfg.n {
        let mut rng = RngStream::keyed(cfg.seed, StreamDomain::Sim, 0, i as u64);
        let (x, _du, choice) =
            draw_observation(cfg.layout, cfg.d, &truth, &eps_chol, &mut rng)?;
        choices.push(choice);
        designs.extend_from_slice(x.as_slice());
    }
    let mut data = ChoiceDataset::new(cfg.d, p, choices, designs)?;
    data.layout = cfg.layout.name().to_string();
    data.seed = cfg.seed;
    Ok((data, truth))
}
