//! Central finite-difference checks of tape gradients.

use super::{BoundParams, ParamStore, Tape, TapeError, Var};
use crate::stochastic::RngStream;

/// Outcome of one probed coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn rel_err(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs()
            / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Default denominator floor for [`Probe::rel_err`].
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub probes: Vec<Probe>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.probes
            .iter()
            .map(|p| p.rel_err(REL_FLOOR))
            .fold(0.0, f64::max)
    }
}

/// Compare the tape gradient of `loss` with central differences of step `h`
/// at `n_probes` coordinates drawn uniformly over all parameters (or at
/// every coordinate when `n_probes` is 0).
///
/// `loss` must be a deterministic function of the parameters.
pub fn check<F>(
    params: &ParamStore,
    h: f64,
    n_probes: usize,
    rng: &mut RngStream,
    loss: F,
) -> Result<GradCheck, TapeError>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var, TapeError>,
{
    let eval = |p: &ParamStore| -> Result<f64, TapeError> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape)?;
        let l = loss(&mut tape, &bound)?;
        Ok(tape.value(l).item())
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let l = loss(&mut tape, &bound)?;
    let grads = tape.backward(l)?;
    let analytic = bound.collect(&tape, &grads);

    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.clone(), i)))
        .collect();
    let chosen: Vec<(String, usize)> = if n_probes == 0 || n_probes >= coords.len() {
        coords
    } else {
        (0..n_probes)
            .map(|_| coords[rng.below(coords.len())].clone())
            .collect()
    };

    let mut probes = Vec::with_capacity(chosen.len());
    let mut work = params.clone();
    for (name, idx) in chosen {
        let orig = params.get(&name).expect("probe name").data()[idx];
        work.get_mut(&name).expect("probe name").data_mut()[idx] = orig + h;
        let up = eval(&work)?;
        work.get_mut(&name).expect("probe name").data_mut()[idx] = orig - h;
        let down = eval(&work)?;
        work.get_mut(&name).expect("probe name").data_mut()[idx] = orig;
        probes.push(Probe {
            analytic: analytic[&name][idx],
            numeric: (up - down) / (2.0 * h),
            param: name,
            index: idx,
        });
    }
    Ok(GradCheck { probes })
}
