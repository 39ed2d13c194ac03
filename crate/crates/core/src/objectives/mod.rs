//! Losses, the Gamma–Gamma KL divergence, the kernel prior and Adam.

mod adam;

pub use adam::{clip_global_norm, AdamConfig, AdamState};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special;
use crate::tape::{Tape, TapeError, Tensor, Var};

/// Floor added to every softplus shape output.
pub const SHAPE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("{what} must be positive, got {value}")]
    Domain { what: &'static str, value: f64 },
    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("target value {0} is not binary")]
    NonBinary(f64),
    #[error("parameter {0} missing from gradient map")]
    MissingGrad(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

fn positive(what: &'static str, v: f64) -> Result<(), ObjectiveError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ObjectiveError::Domain { what, value: v })
    }
}

/// KL(Gamma(q, 1) ‖ Gamma(p, rate)), rate parameterization.
pub fn kl_gamma(q: f64, p: f64, rate: f64) -> Result<f64, ObjectiveError> {
    positive("q shape", q)?;
    positive("prior shape", p)?;
    positive("prior rate", rate)?;
    let kl = (q - p) * special::digamma_unchecked(q) - special::log_gamma_unchecked(q)
        + special::log_gamma_unchecked(p)
        - p * rate.ln()
        + q * (rate - 1.0);
    // Rounding can leave tiny negatives when the distributions coincide.
    Ok(kl.max(0.0))
}

/// Negative ELBO in minimization form.
pub fn elbo_loss(nll: f64, kl_sum: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        nll
    } else {
        nll + lambda * kl_sum
    }
}

/// Same as [`elbo_loss`] on the tape.
pub fn elbo_loss_node(
    tape: &mut Tape,
    nll: Var,
    kl_sum: Option<Var>,
    lambda: f64,
) -> Result<Var, TapeError> {
    match kl_sum {
        Some(kl) if lambda != 0.0 => {
            let w = tape.scale(kl, lambda)?;
            tape.add(nll, w)
        }
        _ => Ok(nll),
    }
}

/// `scale · exp(-dist2 / (2 len²))`.
pub fn rbf_kernel(dist2: f64, len: f64, scale: f64) -> f64 {
    scale * (-dist2 / (2.0 * len * len)).exp()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64, ObjectiveError> {
    if a.len() != b.len() {
        return Err(ObjectiveError::Length {
            what: "feature vector",
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Prior shape for gate groups 1 and 2 under the feature-kernel prior.
pub fn rbf_prior_shape(
    cur: &[f64],
    prev: &[f64],
    len: f64,
    scale: f64,
) -> Result<f64, ObjectiveError> {
    positive("length scale", len)?;
    positive("output scale", scale)?;
    Ok(rbf_kernel(squared_distance(cur, prev)?, len, scale) + SHAPE_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    #[default]
    Constant,
    FeatureKernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub mode: PriorMode,
    /// Constant prior shape per gate group.
    pub shape: [f64; 5],
    /// Prior rate per gate group.
    pub rate: [f64; 5],
    /// Initial kernel length scale (learned in log space).
    pub length_scale: f64,
    /// Initial kernel output scale (learned in log space).
    pub output_scale: f64,
    pub lambda: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            mode: PriorMode::Constant,
            shape: [1.0; 5],
            rate: [1.0; 5],
            length_scale: 1.0,
            output_scale: 1.0,
            lambda: 0.01,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for &a in &self.shape {
            positive("prior shape", a)?;
        }
        for &b in &self.rate {
            positive("prior rate", b)?;
        }
        positive("length scale", self.length_scale)?;
        positive("output scale", self.output_scale)?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(ObjectiveError::Domain {
                what: "lambda",
                value: self.lambda,
            });
        }
        Ok(())
    }
}

/// Linear head plus mean softmax cross-entropy over the batch.
pub fn classification_loss(
    tape: &mut Tape,
    h: Var,
    head_w: Var,
    head_b: Var,
    labels: &[usize],
) -> Result<Var, ObjectiveError> {
    let classes = tape.value(head_w).cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(ObjectiveError::Label {
            label: bad,
            classes,
        });
    }
    let z = tape.matmul(h, head_w)?;
    let z = tape.add(z, head_b)?;
    let ce = tape.softmax_ce_rows(z, labels)?;
    Ok(tape.mean(ce)?)
}

/// Frame-level Bernoulli NLL for next-step prediction.
///
/// `hidden[t]` is the top-layer state after consuming frame `t`; frame `t`
/// is predicted from `hidden[t-1]`, and frame 0 from `initial`. Each
/// `targets[t]` is `batch × notes`. The loss sums over notes, averages over
/// each sequence's valid frames (`lengths`), then over sequences.
pub fn polyphonic_nll(
    tape: &mut Tape,
    initial: Var,
    hidden: &[Var],
    head_w: Var,
    head_b: Var,
    targets: &[Tensor],
    lengths: &[usize],
) -> Result<Var, ObjectiveError> {
    if hidden.len() != targets.len() {
        return Err(ObjectiveError::Length {
            what: "target frames",
            expected: hidden.len(),
            got: targets.len(),
        });
    }
    let batch = lengths.len();
    if let Some(&v) = targets
        .iter()
        .flat_map(|t| t.data())
        .find(|&&v| v != 0.0 && v != 1.0)
    {
        return Err(ObjectiveError::NonBinary(v));
    }
    let mut terms = Vec::with_capacity(targets.len());
    for (t, target) in targets.iter().enumerate() {
        if target.rows() != batch {
            return Err(ObjectiveError::Length {
                what: "target batch",
                expected: batch,
                got: target.rows(),
            });
        }
        let weights: Vec<f64> = lengths
            .iter()
            .map(|&len| {
                if t < len {
                    1.0 / (len as f64 * batch as f64)
                } else {
                    0.0
                }
            })
            .collect();
        if weights.iter().all(|&w| w == 0.0) {
            continue;
        }
        let prev = if t == 0 { initial } else { hidden[t - 1] };
        let z = tape.matmul(prev, head_w)?;
        let z = tape.add(z, head_b)?;
        let nll = tape.bce_logits_rows(z, target)?;
        terms.push(tape.weighted_sum(nll, weights)?);
    }
    if terms.is_empty() {
        return Err(ObjectiveError::Length {
            what: "valid frames",
            expected: 1,
            got: 0,
        });
    }
    Ok(tape.add_n(&terms)?)
}
