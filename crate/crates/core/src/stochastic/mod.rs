//! Random streams, Gamma and Gumbel sampling, and reparameterized gradients.
//!
//! Gamma draws carry their pathwise derivative `du/dα`, obtained by
//! implicit differentiation of the CDF with the quantile held fixed:
//!
//! ```text
//! du/dα = -(∂P(α, u)/∂α) / p(u; α)
//! ```
//!
//! The formula does not depend on how `u` was produced, so the shape < 1
//! boost used by the sampler needs no special handling.

mod rng;

pub use rng::{philox4x32_10, RngStream};

use thiserror::Error;

use crate::special::{self, SpecialError};

/// Lower clamp for Gamma draws.
pub const DRAW_FLOOR: f64 = 1e-12;

/// Densities below this are treated as underflow when forming `du/dα`.
pub const PDF_UNDERFLOW: f64 = 1e-290;

const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StochasticError {
    #[error("{0}")]
    Special(#[from] SpecialError),
    #[error("{what} must be positive, got {value}")]
    Domain { what: &'static str, value: f64 },
    #[error(
        "gamma density underflow at shape={shape}, value={value}; pathwise gradient undefined"
    )]
    PdfUnderflow { shape: f64, value: f64 },
    #[error("noise replay exhausted after {0} values")]
    ReplayExhausted(usize),
}

/// One reparameterized Gamma(shape, 1) draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaDraw {
    pub shape: f64,
    pub value: f64,
    /// du/dα at the drawn value.
    pub pathwise_grad: f64,
}

/// Draw from Gamma(shape, 1) by the Marsaglia–Tsang squeeze, without the
/// gradient. Shapes below one are sampled at `shape + 1` and scaled by
/// `U^{1/shape}`.
pub fn sample_gamma_value(shape: f64, rng: &mut RngStream) -> Result<f64, StochasticError> {
    if !(shape > 0.0) || !shape.is_finite() {
        return Err(StochasticError::Domain {
            what: "gamma shape",
            value: shape,
        });
    }
    let boosted = shape < 1.0;
    let a = if boosted { shape + 1.0 } else { shape };
    let d = a - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    let v = loop {
        let x = rng.normal();
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u = rng.uniform();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            break v;
        }
    };
    let mut value = d * v;
    if boosted {
        value *= rng.uniform().powf(1.0 / shape);
    }
    Ok(value.max(DRAW_FLOOR))
}

/// Draw from Gamma(shape, 1) together with its pathwise derivative.
pub fn sample_gamma(shape: f64, rng: &mut RngStream) -> Result<GammaDraw, StochasticError> {
    let value = sample_gamma_value(shape, rng)?;
    let pathwise_grad = pathwise_grad_gamma(shape, value)?;
    Ok(GammaDraw {
        shape,
        value,
        pathwise_grad,
    })
}

/// Implicit-differentiation derivative of a Gamma(shape, 1) draw with
/// respect to its shape.
pub fn pathwise_grad_gamma(shape: f64, value: f64) -> Result<f64, StochasticError> {
    if !(shape > 0.0) {
        return Err(StochasticError::Domain {
            what: "gamma shape",
            value: shape,
        });
    }
    if !(value > 0.0) {
        return Err(StochasticError::Domain {
            what: "gamma draw",
            value,
        });
    }
    // The density itself is only needed for the underflow guard; skip the
    // log-gamma evaluation when the cheap part of ln p already rules it out.
    let rough = (shape - 1.0) * value.ln() - value;
    if shape > 20.0 || rough < -600.0 {
        let pdf = special::gamma_ln_pdf_unchecked(shape, value).exp();
        if !(pdf >= PDF_UNDERFLOW) {
            return Err(StochasticError::PdfUnderflow { shape, value });
        }
    }
    Ok(special::gamma_shape_transport(shape, value)?)
}

/// Standard Gumbel draw `-ln(-ln U)` with U clamped away from 0 and 1.
pub fn gumbel(rng: &mut RngStream) -> f64 {
    let u = rng.uniform().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

/// Difference of two independent Gumbels, the noise of a binary concrete
/// relaxation.
pub fn logistic_noise(rng: &mut RngStream) -> f64 {
    let g1 = gumbel(rng);
    let g2 = gumbel(rng);
    g1 - g2
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary concrete relaxation `σ((logit + noise) / τ)` for given noise.
pub fn binary_concrete(logit: f64, noise: f64, temperature: f64) -> Result<f64, StochasticError> {
    if !(temperature > 0.0) {
        return Err(StochasticError::Domain {
            what: "temperature",
            value: temperature,
        });
    }
    Ok(sigmoid((logit + noise) / temperature))
}

/// Draw a binary concrete gate value. Its derivative in `logit` is
/// `value (1 - value) / τ`.
pub fn sample_binary_concrete(
    logit: f64,
    temperature: f64,
    rng: &mut RngStream,
) -> Result<f64, StochasticError> {
    if !(temperature > 0.0) {
        return Err(StochasticError::Domain {
            what: "temperature",
            value: temperature,
        });
    }
    let noise = logistic_noise(rng);
    binary_concrete(logit, noise, temperature)
}

/// Beta variate from two Gamma draws sharing rate 1.
pub fn beta_from_gammas(u1: f64, u2: f64) -> Result<f64, StochasticError> {
    if !(u1 > 0.0) {
        return Err(StochasticError::Domain {
            what: "u1",
            value: u1,
        });
    }
    if !(u2 > 0.0) {
        return Err(StochasticError::Domain {
            what: "u2",
            value: u2,
        });
    }
    Ok(u1 / (u1 + u2))
}

/// Where stochastic gates get their randomness.
///
/// `Record` samples like `Sample` and logs the noise in a replayable form:
/// the CDF quantile of every Gamma draw and the raw logistic noise of every
/// concrete gate. `Replay` feeds a log back, re-deriving Gamma draws from
/// their quantiles at the (possibly perturbed) new shapes. That is the
/// common-random-numbers setting under which finite differences of a
/// stochastic forward pass match the pathwise gradient.
#[derive(Debug, Clone)]
pub enum NoiseSource {
    /// Deterministic: gates use analytic means, concrete gates drop noise.
    Mean,
    Sample(RngStream),
    Record {
        rng: RngStream,
        log: Vec<f64>,
    },
    Replay {
        log: Vec<f64>,
        cursor: usize,
    },
}

impl NoiseSource {
    pub fn is_mean(&self) -> bool {
        matches!(self, NoiseSource::Mean)
    }

    pub fn recording(rng: RngStream) -> Self {
        NoiseSource::Record {
            rng,
            log: Vec::new(),
        }
    }

    pub fn replay(log: Vec<f64>) -> Self {
        NoiseSource::Replay { log, cursor: 0 }
    }

    /// The recorded log, if this source was recording.
    pub fn into_log(self) -> Option<Vec<f64>> {
        match self {
            NoiseSource::Record { log, .. } => Some(log),
            _ => None,
        }
    }

    fn next_logged(log: &[f64], cursor: &mut usize) -> Result<f64, StochasticError> {
        let v = *log
            .get(*cursor)
            .ok_or(StochasticError::ReplayExhausted(log.len()))?;
        *cursor += 1;
        Ok(v)
    }

    /// A Gamma(shape, 1) draw. Calling this on `Mean` is a logic error
    /// and returns the mean itself with zero-variance gradient 1.
    pub fn gamma(&mut self, shape: f64) -> Result<GammaDraw, StochasticError> {
        match self {
            NoiseSource::Mean => Ok(GammaDraw {
                shape,
                value: shape,
                pathwise_grad: 1.0,
            }),
            NoiseSource::Sample(rng) => sample_gamma(shape, rng),
            NoiseSource::Record { rng, log } => {
                let draw = sample_gamma(shape, rng)?;
                log.push(special::reg_lower_gamma(shape, draw.value)?);
                Ok(draw)
            }
            NoiseSource::Replay { log, cursor } => {
                if !(shape > 0.0) {
                    return Err(StochasticError::Domain {
                        what: "gamma shape",
                        value: shape,
                    });
                }
                let p = Self::next_logged(log, cursor)?.clamp(1e-300, 1.0 - 1e-16);
                let value = special::gamma_quantile(shape, p)?.max(DRAW_FLOOR);
                let pathwise_grad = pathwise_grad_gamma(shape, value)?;
                Ok(GammaDraw {
                    shape,
                    value,
                    pathwise_grad,
                })
            }
        }
    }

    /// Logistic noise for a concrete gate; zero in `Mean` mode.
    pub fn logistic(&mut self) -> Result<f64, StochasticError> {
        match self {
            NoiseSource::Mean => Ok(0.0),
            NoiseSource::Sample(rng) => Ok(logistic_noise(rng)),
            NoiseSource::Record { rng, log } => {
                let v = logistic_noise(rng);
                log.push(v);
                Ok(v)
            }
            NoiseSource::Replay { log, cursor } => Self::next_logged(log, cursor),
        }
    }
}
