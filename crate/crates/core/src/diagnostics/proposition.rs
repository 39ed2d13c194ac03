//! Bounds on `∂i/∂U¹` for the 5G input gate near `U¹ = 0.5`.
//!
//! With `u³ = u⁴ = u⁵ = 0.5` and `u¹` drawn from Gamma(0.5, 1) inside the
//! band `|u¹ - 0.5| ≤ 0.5δ`, the pathwise derivative of the input gate is
//! `(u⁴ + u⁵)/(u¹ + u³ + u⁴ + u⁵)² · du¹/dU¹`. For small `δ` it should lie
//! in `[S₀(δ), S₁(δ)]`; past the branch point the upper end is a constant.

use serde::{Deserialize, Serialize};

use super::DiagError;
use crate::stochastic::{pathwise_grad_gamma, sample_gamma_value, RngStream};

/// Below this fraction of proposals landing in the band the estimate is
/// reported as a sampling failure.
pub const LOWER_ACCEPTANCE: f64 = 1e-4;

/// Largest slope of the logistic sigmoid, printed for comparison.
pub const SIGMOID_MAX_SLOPE: f64 = 0.25;

const SHAPE: f64 = 0.5;
const FIXED_U: f64 = 0.5;

/// `δ` above which the upper bound switches to the constant branch.
pub fn branch_point() -> f64 {
    8.0 / 1167.0
}

pub fn upper_bound_constant() -> f64 {
    6260063.0 / 18180288.0
}

/// `(S₀(δ), S₁(δ))`.
pub fn proposition_bounds(delta: f64) -> (f64, f64) {
    let d2 = delta * delta;
    let s0 = -(36125.0 * d2 + 107780.0 * delta - 214200.0) / (38880.0 * (4.0 - delta).powi(2));
    let s1 = -(36125.0 * d2 - 107780.0 * delta - 214200.0) / (38880.0 * (4.0 + delta).powi(2));
    (s0, s1)
}

fn upper_bound(delta: f64) -> f64 {
    if delta > branch_point() {
        upper_bound_constant()
    } else {
        proposition_bounds(delta).1
    }
}

/// Gate derivative `∂i/∂u¹` with the other draws held at 0.5.
pub fn gate_slope(u1: f64) -> f64 {
    let (u3, u4, u5) = (FIXED_U, FIXED_U, FIXED_U);
    (u4 + u5) / (u1 + u3 + u4 + u5).powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropositionReport {
    pub delta: f64,
    pub s0: f64,
    pub s1: f64,
    /// Upper end actually used: `S₁` up to the branch point, then the constant.
    pub upper: f64,
    pub proposals: u64,
    pub accepted: usize,
    pub acceptance_rate: f64,
    /// Too few proposals landed in the band; the statistics below are unreliable or absent.
    pub sampling_failure: bool,
    pub mean_derivative: Option<f64>,
    pub min_derivative: Option<f64>,
    pub max_derivative: Option<f64>,
    /// Fraction of in-band draws whose derivative lies in `[S₀, upper]`.
    pub containment_rate: Option<f64>,
    /// Whether the mean derivative lies in `[S₀, upper]`.
    pub mean_contained: Option<bool>,
    pub sigmoid_max_slope: f64,
}

impl PropositionReport {
    pub fn csv_header() -> &'static str {
        "delta,s0,s1,upper,accepted,acceptance_rate,sampling_failure,mean_derivative,min_derivative,max_derivative,containment_rate,mean_contained,sigmoid_max_slope"
    }

    pub fn csv_row(&self) -> String {
        let o = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.delta,
            self.s0,
            self.s1,
            self.upper,
            self.accepted,
            self.acceptance_rate,
            self.sampling_failure,
            o(self.mean_derivative),
            o(self.min_derivative),
            o(self.max_derivative),
            o(self.containment_rate),
            self.mean_contained
                .map_or_else(String::new, |b| b.to_string()),
            self.sigmoid_max_slope
        )
    }
}

/// Sample `n` in-band draws per `δ` and compare their derivatives with the
/// bounds. Each `δ` uses its own child of `rng`.
pub fn verify_proposition(
    deltas: &[f64],
    n: usize,
    rng: &RngStream,
) -> Result<Vec<PropositionReport>, DiagError> {
    if n == 0 {
        return Err(DiagError::Usage("need at least one draw per delta".into()));
    }
    let budget = (n as f64 / LOWER_ACCEPTANCE).ceil() as u64;
    let mut out = Vec::with_capacity(deltas.len());
    for (k, &delta) in deltas.iter().enumerate() {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(DiagError::Usage(format!(
                "delta must be positive, got {delta}"
            )));
        }
        let mut stream = rng.split(k as u64);
        let (lo, hi) = (SHAPE * (1.0 - delta), SHAPE * (1.0 + delta));
        let (s0, s1) = proposition_bounds(delta);
        let upper = upper_bound(delta);
        let mut derivs = Vec::with_capacity(n);
        let mut proposals = 0u64;
        while derivs.len() < n && proposals < budget {
            proposals += 1;
            let u = sample_gamma_value(SHAPE, &mut stream)?;
            if (lo..=hi).contains(&u) {
                derivs.push(gate_slope(u) * pathwise_grad_gamma(SHAPE, u)?);
            }
        }
        let rate = derivs.len() as f64 / proposals as f64;
        let m = derivs.len();
        let inside = |d: f64| d >= s0 && d <= upper;
        let mean = (m > 0).then(|| derivs.iter().sum::<f64>() / m as f64);
        out.push(PropositionReport {
            delta,
            s0,
            s1,
            upper,
            proposals,
            accepted: m,
            acceptance_rate: rate,
            sampling_failure: rate < LOWER_ACCEPTANCE || m < n,
            mean_derivative: mean,
            min_derivative: derivs.iter().copied().reduce(f64::min),
            max_derivative: derivs.iter().copied().reduce(f64::max),
            containment_rate: (m > 0)
                .then(|| derivs.iter().filter(|&&d| inside(d)).count() as f64 / m as f64),
            mean_contained: mean.map(inside),
            sigmoid_max_slope: SIGMOID_MAX_SLOPE,
        });
    }
    Ok(out)
}
