//! Differentiable surrogates for the argmax decoder.
//!
//! The choice likelihood involves an argmax over latent utilities, which has
//! no usable gradient. Three schemes stand in for it during training:
//!
//! * [`SurrogateScheme::Ste`] — argmax in the forward pass, the softmax
//!   Jacobian in the backward pass (straight-through estimator);
//! * [`SurrogateScheme::GumbelSoftmax`] — a Gumbel-softmax relaxation in
//!   both passes;
//! * [`SurrogateScheme::Combined`] — argmax forward, Gumbel-softmax
//!   backward, sharing one noise draw between the passes.
//!
//! Everything here is a pure function of its inputs; noise is supplied by
//! the caller so that parallel schedules stay deterministic.

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::model::{choose, Utilities};

/// The three argmax surrogates. The temperature β is passed alongside at
/// call sites (it anneals during training; the scheme itself is stateless).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateScheme {
    /// Argmax forward, softmax backward.
    Ste,
    /// Gumbel-softmax in both passes.
    #[serde(rename = "gumbel")]
    GumbelSoftmax,
    /// Argmax forward, Gumbel-softmax backward with the same noise draw.
    Combined,
}

impl SurrogateScheme {
    pub fn name(&self) -> &'static str {
        match self {
            SurrogateScheme::Ste => "ste",
            SurrogateScheme::GumbelSoftmax => "gumbel",
            SurrogateScheme::Combined => "combined",
        }
    }

    /// Whether the scheme consumes Gumbel noise.
    pub fn uses_noise(&self) -> bool {
        !matches!(self, SurrogateScheme::Ste)
    }
}

impl std::str::FromStr for SurrogateScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ste" => Ok(SurrogateScheme::Ste),
            "gumbel" => Ok(SurrogateScheme::GumbelSoftmax),
            "combined" => Ok(SurrogateScheme::Combined),
            other => Err(format!("unknown scheme `{other}` (expected ste|gumbel|combined)")),
        }
    }
}

impl std::fmt::Display for SurrogateScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Plain softmax with max-subtraction (the β=1, zero-noise special case).
pub fn softmax(u: &[f64]) -> Vec<f64> {
    let max = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = u.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// The Gumbel-softmax transform ỹ_j = exp((u_j+g_j)/β) / Σ_k exp((u_k+g_k)/β),
/// computed with max-subtraction so large utilities cannot overflow.
pub fn gumbel_softmax(u: &[f64], g: &[f64], beta: f64) -> Vec<f64> {
    assert_eq!(u.len(), g.len(), "utility and noise lengths differ");
    assert!(beta > 0.0, "temperature must be positive");
    let logits: Vec<f64> = u.iter().zip(g).map(|(&ui, &gi)| (ui + gi) / beta).collect();
    softmax(&logits)
}

/// One-hot argmax with ties broken by lowest index.
pub fn argmax_onehot(u: &[f64]) -> Vec<f64> {
    choose(&Utilities::Full(u.to_vec()), 0.0)
}

/// The output of [`decode`]: the forward value, the smooth vector the
/// backward pass linearizes through, and the effective temperature of that
/// smooth path.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// What the forward pass emits (a simplex vertex for the hard schemes).
    pub forward: Vec<f64>,
    /// The smooth surrogate value: softmax(u) for STE, the Gumbel-softmax
    /// for the other two schemes.
    pub soft: Vec<f64>,
    /// Temperature of the smooth path: 1 for STE, β otherwise.
    pub beta_eff: f64,
}

impl Decoded {
    /// Jacobian of the smooth path, (diag(s) − s·sᵀ)/β_eff.
    pub fn jacobian(&self) -> Matrix {
        let d = self.soft.len();
        let mut j = Matrix::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                let v = if r == c {
                    self.soft[r] * (1.0 - self.soft[r])
                } else {
                    -self.soft[r] * self.soft[c]
                };
                j.set(r, c, v / self.beta_eff);
            }
        }
        j
    }

    /// Vector–Jacobian product Jᵀ·v = (s∘v − (sᵀv)·s)/β_eff, the backward
    /// contraction used by the loss.
    pub fn vjp(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.soft.len());
        let sv: f64 = self.soft.iter().zip(v).map(|(s, x)| s * x).sum();
        self.soft
            .iter()
            .zip(v)
            .map(|(&s, &x)| (s * x - sv * s) / self.beta_eff)
            .collect()
    }
}

/// Run one surrogate decode of the utilities `u` with noise `g` (ignored by
/// STE) at temperature `beta`.
pub fn decode(u: &[f64], scheme: SurrogateScheme, beta: f64, g: &[f64]) -> Decoded {
    match scheme {
        SurrogateScheme::Ste => Decoded {
            forward: argmax_onehot(u),
            soft: softmax(u),
            beta_eff: 1.0,
        },
        SurrogateScheme::GumbelSoftmax => {
            let soft = gumbel_softmax(u, g, beta);
            Decoded { forward: soft.clone(), soft, beta_eff: beta }
        }
        SurrogateScheme::Combined => {
            // The hard forward and the soft backward look at the *same*
            // perturbed logits u + g: the forward one-hot is the vertex the
            // Gumbel-softmax tends to as β → 0, so the straight-through pair
            // stays consistent (and the hard decode samples a category with
            // probability softmax(u) by the Gumbel-max property, keeping a
            // live learning signal for observations whose posterior mass sits
            // on the wrong side of the decision boundary).
            let perturbed: Vec<f64> = u.iter().zip(g).map(|(&ui, &gi)| ui + gi).collect();
            Decoded {
                forward: argmax_onehot(&perturbed),
                soft: gumbel_softmax(u, g, beta),
                beta_eff: beta,
            }
        }
    }
}
