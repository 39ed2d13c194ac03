//! Self-verification suite: special-function identities, sampler
//! statistics, gradient checks, the Gamma KL against quadrature, and gate
//! invariants. Every property reports what it measured and the threshold.

use serde::{Deserialize, Serialize};

use crate::cells::{unroll, CellError, StackConfig, UnrollArgs, Variant};
use crate::diagnostics::{branch_point, gate_correlation, proposition_bounds, upper_bound_constant};
use crate::objectives::{kl_gamma, PriorSpec};
use crate::special::{
    self, digamma, gamma_quantile, log_gamma, reg_lower_gamma, reg_upper_gamma, trigamma, EULER_GAMMA,
};
use crate::stochastic::{pathwise_grad_gamma, sample_gamma_value, NoiseSource, RngStream, StochasticError};
use crate::tape::{gradcheck, ParamStore, Tape, TapeError, Tensor, Var};

/// A Gamma(shape, 1) sampler under test.
pub type GammaSampler<'a> = &'a dyn Fn(f64, &mut RngStream) -> Result<f64, StochasticError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Property {
    pub name: String,
    /// NaN when the measurement itself failed; see `error`.
    pub measured: f64,
    pub threshold: f64,
    pub bound: Bound,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub properties: Vec<Property>,
}

impl CheckReport {
    pub fn get(&self, name: &str) -> Option<&Property> {
        self.properties.iter().find(|p| p.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Property> {
        self.properties.iter().filter(|p| !p.passed)
    }
}

struct Suite(Vec<Property>);

impl Suite {
    fn push(&mut self, name: impl Into<String>, bound: Bound, threshold: f64, measured: Result<f64, String>) {
        let (measured, error) = match measured {
            Ok(v) => (v, None),
            Err(e) => (f64::NAN, Some(e)),
        };
        let passed = match bound {
            Bound::AtMost => measured <= threshold,
            Bound::AtLeast => measured >= threshold,
        };
        self.0.push(Property { name: name.into(), measured, threshold, bound, passed, error });
    }
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub const MOMENT_SHAPES: [f64; 4] = [0.5, 1.0, 2.0, 5.0];
pub const MOMENT_DRAWS: usize = 100_000;

/// Two-sided KS critical value at significance 0.001, large-n form.
pub fn ks_critical_001(n: usize) -> f64 {
    1.94947 / (n as f64).sqrt()
}

/// Run every property with the library's own Gamma sampler.
pub fn run_checks() -> CheckReport {
    run_checks_with(&sample_gamma_value)
}

/// Run every property, drawing the sampler-statistics properties from
/// `sampler`. A faulty sampler should fail the moment properties.
pub fn run_checks_with(sampler: GammaSampler<'_>) -> CheckReport {
    let mut suite = Suite(Vec::new());
    special_functions(&mut suite);
    sampler_statistics(&mut suite, sampler);
    pathwise_gradient(&mut suite);
    gamma_kl(&mut suite);
    gradients(&mut suite);
    gates(&mut suite);
    let (_, s1) = proposition_bounds(branch_point());
    let c = upper_bound_constant();
    suite.push("proposition.branch_continuity_rel", Bound::AtMost, 1e-6, Ok(((s1 - c) / c).abs()));
    let passed = suite.0.iter().all(|p| p.passed);
    CheckReport { passed, properties: suite.0 }
}

fn max_over<I: IntoIterator<Item = Result<f64, String>>>(it: I) -> Result<f64, String> {
    it.into_iter().try_fold(0.0f64, |m, v| v.map(|v| m.max(v)))
}

fn special_functions(suite: &mut Suite) {
    let grid = [0.1, 0.3, 0.5, 1.0, 2.5, 8.0, 32.0, 150.0];
    suite.push(
        "special.log_gamma_half",
        Bound::AtMost,
        1e-12,
        log_gamma(0.5).map(|v| (v - std::f64::consts::PI.sqrt().ln()).abs()).map_err(s),
    );
    suite.push(
        "special.log_gamma_recurrence",
        Bound::AtMost,
        1e-9,
        max_over(grid.iter().map(|&x| Ok((log_gamma(x + 1.0).map_err(s)? - log_gamma(x).map_err(s)? - x.ln()).abs()))),
    );
    suite.push("special.digamma_one", Bound::AtMost, 1e-12, digamma(1.0).map(|v| (v + EULER_GAMMA).abs()).map_err(s));
    suite.push(
        "special.digamma_recurrence",
        Bound::AtMost,
        1e-10,
        max_over(grid.iter().map(|&x| Ok((digamma(x + 1.0).map_err(s)? - digamma(x).map_err(s)? - 1.0 / x).abs()))),
    );
    suite.push(
        "special.trigamma_one",
        Bound::AtMost,
        1e-10,
        trigamma(1.0).map(|v| (v - std::f64::consts::PI.powi(2) / 6.0).abs()).map_err(s),
    );
    let pairs = [(0.5, 0.2), (1.0, 1.0), (2.0, 2.0), (5.0, 3.0), (8.0, 12.0), (32.0, 30.0)];
    suite.push(
        "special.incomplete_gamma_complement",
        Bound::AtMost,
        1e-12,
        max_over(pairs.iter().map(|&(a, x)| Ok((reg_lower_gamma(a, x).map_err(s)? + reg_upper_gamma(a, x).map_err(s)? - 1.0).abs()))),
    );
    // P(1, x) = 1 - e^{-x}
    suite.push(
        "special.incomplete_gamma_exponential",
        Bound::AtMost,
        1e-13,
        max_over([0.1, 1.0, 4.0].iter().map(|&x| Ok((reg_lower_gamma(1.0, x).map_err(s)? + (-x).exp_m1()).abs()))),
    );
    suite.push(
        "special.quantile_round_trip",
        Bound::AtMost,
        1e-9,
        max_over([0.3, 1.0, 2.0, 8.0].iter().flat_map(|&a| {
            [0.05, 0.5, 0.95].map(move |p| Ok((reg_lower_gamma(a, gamma_quantile(a, p).map_err(s)?).map_err(s)? - p).abs()))
        })),
    );
}

fn sampler_statistics(suite: &mut Suite, sampler: GammaSampler<'_>) {
    let root = RngStream::new(0xc4ec, 0);
    for (k, &a) in MOMENT_SHAPES.iter().enumerate() {
        let mut rng = root.split(k as u64);
        let draws: Result<Vec<f64>, String> = (0..MOMENT_DRAWS).map(|_| sampler(a, &mut rng).map_err(s)).collect();
        let n = MOMENT_DRAWS as f64;
        let (mean_z, var_z) = match draws {
            Ok(xs) => {
                let m = xs.iter().sum::<f64>() / n;
                let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
                // Var(mean) = α/n; Var(s²) ≈ (μ₄ - σ⁴)/n with μ₄ = 3α² + 6α.
                (Ok((m - a).abs() / (a / n).sqrt()), Ok((v - a).abs() / ((2.0 * a * a + 6.0 * a) / n).sqrt()))
            }
            Err(e) => (Err(e.clone()), Err(e)),
        };
        suite.push(format!("stochastic.gamma_mean_z[{a}]"), Bound::AtMost, 3.0, mean_z);
        suite.push(format!("stochastic.gamma_var_z[{a}]"), Bound::AtMost, 3.0, var_z);
    }
    let mut rng = root.split(99);
    let ks = (0..MOMENT_DRAWS).map(|_| sampler(1.0, &mut rng).map_err(s)).collect::<Result<Vec<f64>, String>>().map(|mut xs| {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = -(-x).exp_m1();
                (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
            })
            .fold(0.0, f64::max)
    });
    suite.push("stochastic.ks_exponential", Bound::AtMost, ks_critical_001(MOMENT_DRAWS), ks);
}

/// Quantile by bisection on the regularized incomplete gamma.
fn bisect_quantile(a: f64, p: f64) -> Result<f64, String> {
    let (mut lo, mut hi) = (0.0, a + 10.0 * a.sqrt() + 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if reg_lower_gamma(a, mid).map_err(s)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub const PATHWISE_SHAPES: [f64; 5] = [0.3, 0.5, 1.0, 2.0, 8.0];
pub const PATHWISE_QUANTILES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Largest relative gap between the pathwise Gamma gradient and central
/// differences of the inverse CDF over the shape × quantile grid.
pub fn pathwise_max_rel_err() -> Result<f64, String> {
    max_over(PATHWISE_SHAPES.iter().flat_map(|&a| {
        PATHWISE_QUANTILES.map(move |p| {
            let u = bisect_quantile(a, p)?;
            let eps = 1e-4;
            let fd = (bisect_quantile(a + eps, p)? - bisect_quantile(a - eps, p)?) / (2.0 * eps);
            let g = pathwise_grad_gamma(a, u).map_err(s)?;
            Ok((g - fd).abs() / fd.abs().max(1e-12))
        })
    }))
}

fn pathwise_gradient(suite: &mut Suite) {
    suite.push("stochastic.pathwise_grad_vs_inverse_cdf", Bound::AtMost, 1e-2, pathwise_max_rel_err());
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

/// `∫ q ln(q/p)` for q = Gamma(αq, 1), p = Gamma(αp, rate), by composite
/// Simpson in log space over `u ∈ (e^-80, 200)`.
pub fn kl_quadrature(q: f64, p: f64, rate: f64) -> f64 {
    let f = |y: f64| {
        let u = y.exp();
        let lq = special::gamma_ln_pdf_unchecked(q, u);
        let lp = special::gamma_ln_pdf_unchecked(p, rate * u) + rate.ln();
        lq.exp() * u * (lq - lp)
    };
    simpson(f, -80.0, 200f64.ln(), 40_000)
}

pub const KL_SHAPES: [f64; 4] = [0.5, 1.0, 2.0, 5.0];
pub const KL_RATES: [f64; 3] = [0.5, 1.0, 2.0];

fn gamma_kl(suite: &mut Suite) {
    let grid = KL_SHAPES.iter().flat_map(|&q| KL_SHAPES.iter().flat_map(move |&p| KL_RATES.map(move |r| (q, p, r))));
    suite.push(
        "objectives.kl_vs_quadrature",
        Bound::AtMost,
        1e-6,
        max_over(grid.map(|(q, p, r)| Ok((kl_gamma(q, p, r).map_err(s)? - kl_quadrature(q, p, r)).abs()))),
    );
    suite.push(
        "objectives.kl_zero_at_equality",
        Bound::AtMost,
        1e-12,
        max_over(KL_SHAPES.iter().map(|&a| kl_gamma(a, a, 1.0).map(f64::abs).map_err(s))),
    );
    let off = [(2.0, 1.0, 1.0), (0.5, 2.0, 1.0), (1.0, 1.0, 2.0), (5.0, 0.5, 0.5), (1.0, 5.0, 2.0), (3.0, 3.0, 0.5)];
    suite.push(
        "objectives.kl_positive_off_equality",
        Bound::AtLeast,
        1e-9,
        off.iter().map(|&(q, p, r)| kl_gamma(q, p, r).map_err(s)).try_fold(f64::INFINITY, |m, v| v.map(|v| m.min(v))),
    );
}

fn stack_params(cfg: &StackConfig, seed: u64) -> Result<ParamStore, String> {
    let mut p = ParamStore::new();
    cfg.init_params(&mut p, &mut RngStream::new(seed, 0)).map_err(s)?;
    let mut rng = RngStream::new(seed, 1);
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += 0.4 * (rng.uniform() - 0.5));
    }
    Ok(p)
}

fn inputs(steps: usize, rows: usize, dim: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = RngStream::new(seed, 2);
    (0..steps)
        .map(|_| Tensor::matrix(rows, dim, (0..rows * dim).map(|_| 2.0 * rng.uniform() - 1.0).collect()).expect("input shape"))
        .collect()
}

fn unroll_loss(
    cfg: &StackConfig,
    t: &mut Tape,
    b: &crate::tape::BoundParams,
    xs: &[Tensor],
    noise: &mut NoiseSource,
    spec: &PriorSpec,
) -> Result<Var, TapeError> {
    let vars = xs.iter().map(|x| t.leaf(x.clone())).collect::<Result<Vec<_>, _>>()?;
    let prior = cfg.variant.has_prior().then_some(spec);
    let args = UnrollArgs { lengths: None, prior, dist2: None };
    let u = unroll(cfg, t, b, &vars, noise, args).map_err(|e| match e {
        CellError::Tape(e) => e,
        e => TapeError::Invalid { op: "unroll", detail: e.to_string() },
    })?;
    let h = t.concat(&u.outputs)?;
    let sq = t.mul(h, h)?;
    let l = t.mean(sq)?;
    crate::objectives::elbo_loss_node(t, l, u.kl_sum, spec.lambda)
}

/// Largest finite-difference relative error of a three-step unroll.
/// `stochastic` samples the gates and replays the same noise for every
/// perturbed pass; otherwise gates run in mean mode.
pub fn cell_gradcheck(variant: Variant, stochastic: bool) -> Result<f64, String> {
    let mut cfg = StackConfig::new(variant, 3, 4);
    cfg.layers = 2;
    let p = stack_params(&cfg, 17)?;
    let xs = inputs(3, 2, 3, 17);
    let spec = PriorSpec { lambda: 0.3, ..PriorSpec::default() };
    let mut rng = RngStream::new(17, 3);
    let gc = if stochastic {
        let mut rec = NoiseSource::recording(RngStream::new(17, 4));
        let mut t = Tape::new();
        let b = p.bind(&mut t).map_err(s)?;
        unroll_loss(&cfg, &mut t, &b, &xs, &mut rec, &spec).map_err(s)?;
        let log = rec.into_log().expect("recording source");
        gradcheck::check(&p, 1e-5, 40, &mut rng, |t, b| unroll_loss(&cfg, t, b, &xs, &mut NoiseSource::replay(log.clone()), &spec))
    } else {
        gradcheck::check(&p, 1e-5, 40, &mut rng, |t, b| unroll_loss(&cfg, t, b, &xs, &mut NoiseSource::Mean, &spec))
    };
    gc.map(|g| g.max_rel_err()).map_err(s)
}

fn gradients(suite: &mut Suite) {
    for v in Variant::ALL {
        suite.push(format!("tape.gradcheck_mean[{v}]"), Bound::AtMost, 1e-4, cell_gradcheck(v, false));
    }
    for v in Variant::ALL.into_iter().filter(|v| v.is_stochastic()) {
        suite.push(format!("tape.gradcheck_sampled[{v}]"), Bound::AtMost, 2e-2, cell_gradcheck(v, true));
    }
}

/// Gate values of one sampled step for every variant: how many fall
/// outside `(0, 1)`, and the largest CIFG `|i + f - 1|`.
fn gate_ranges() -> Result<(f64, f64), String> {
    let (mut outside, mut cifg) = (0usize, 0.0f64);
    for v in Variant::ALL {
        let cfg = StackConfig::new(v, 4, 6);
        let p = stack_params(&cfg, 31)?;
        let xs = inputs(4, 8, 4, 31);
        let mut t = Tape::new();
        let b = p.bind(&mut t).map_err(s)?;
        let vars = xs.iter().map(|x| t.leaf(x.clone())).collect::<Result<Vec<_>, _>>().map_err(s)?;
        let spec = PriorSpec::default();
        let args = UnrollArgs { lengths: None, prior: v.has_prior().then_some(&spec), dist2: None };
        let u = unroll(&cfg, &mut t, &b, &vars, &mut NoiseSource::Sample(RngStream::new(31, 5)), args).map_err(s)?;
        for tr in u.traces.iter().flatten() {
            for g in [tr.i, tr.f, tr.o] {
                outside += t.value(g).data().iter().filter(|&&x| !(x > 0.0 && x < 1.0)).count();
            }
            if v == Variant::Cifg {
                for (i, f) in t.value(tr.i).data().iter().zip(t.value(tr.f).data()) {
                    cifg = cifg.max((i + f - 1.0).abs());
                }
            }
        }
    }
    Ok((outside as f64, cifg))
}

fn gates(suite: &mut Suite) {
    let ranges = gate_ranges();
    suite.push("cells.gates_outside_open_interval", Bound::AtMost, 0.0, ranges.clone().map(|r| r.0));
    // f is computed as 1 - i, so the sum is exact up to one rounding
    suite.push("cells.cifg_sum_error", Bound::AtMost, f64::EPSILON, ranges.map(|r| r.1));
    let mut rng = RngStream::new(0xc011, 0);
    let blstm = gate_correlation(Variant::Blstm, &[1.0, 2.0, 0.7, 1.5], 10_000, &mut rng)
        .map_err(s)
        .and_then(|c| c.rho.zip(c.se).map(|(r, se)| r.abs() / se).ok_or_else(|| "constant gates".to_string()));
    suite.push("cells.blstm_abs_rho_over_se", Bound::AtMost, 3.0, blstm);
    let g3 = gate_correlation(Variant::Bblstm3g, &[1.0, 1.0, 1.0], 10_000, &mut rng)
        .map_err(s)
        .and_then(|c| c.rho.zip(c.se).map(|(r, se)| r / se).ok_or_else(|| "constant gates".to_string()));
    suite.push("cells.bblstm3g_rho_over_se", Bound::AtLeast, -3.0, g3);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes_with_at_least_twenty_properties() {
        let r = run_checks();
        assert!(r.properties.len() >= 20);
        let bad: Vec<_> = r.failures().collect();
        assert!(r.passed, "{bad:#?}");
        assert!(r.properties.iter().all(|p| p.error.is_none()));
    }

    #[test]
    fn shifted_sampler_fails_the_moment_property() {
        let shifted = |a: f64, rng: &mut RngStream| sample_gamma_value(a, rng).map(|x| 1.1 * x);
        let r = run_checks_with(&shifted);
        assert!(!r.passed);
        for a in MOMENT_SHAPES {
            assert!(!r.get(&format!("stochastic.gamma_mean_z[{a}]")).unwrap().passed);
        }
        assert!(r.get("special.digamma_one").unwrap().passed);
    }

    #[test]
    fn kl_quadrature_known_value() {
        assert!((kl_quadrature(2.0, 1.0, 1.0) - (1.0 - EULER_GAMMA)).abs() < 1e-9);
    }

    #[test]
    fn report_serializes_nan_as_null() {
        let mut s = Suite(Vec::new());
        s.push("x", Bound::AtMost, 1.0, Err("boom".into()));
        assert!(!s.0[0].passed);
        let j = serde_json::to_value(&s.0[0]).unwrap();
        assert!(j["measured"].is_null());
        assert_eq!(j["error"], "boom");
    }
}
