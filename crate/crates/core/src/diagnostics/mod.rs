//! Gate histograms, input–forget correlation, gradient flow through the
//! cell state, and a numerical check of the input-gate derivative bounds.

mod proposition;

pub use proposition::{
    branch_point, gate_slope, proposition_bounds, upper_bound_constant, verify_proposition,
    PropositionReport, LOWER_ACCEPTANCE, SIGMOID_MAX_SLOPE,
};

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::Variant;
use crate::run::{self, Batch, Model, RunConfig, RunError, Split, Task, TaskData};
use crate::stochastic::{sample_gamma_value, NoiseSource, RngStream, StochasticError};
use crate::tape::{ParamStore, Tape, TapeError};

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl DiagError {
    pub fn exit_code(&self) -> i32 {
        match self {
            DiagError::Usage(_) => 1,
            DiagError::Run(e) => e.exit_code(),
            DiagError::Numeric(_) => 3,
            DiagError::Io { .. } => 2,
        }
    }
}

impl From<TapeError> for DiagError {
    fn from(e: TapeError) -> Self {
        DiagError::Numeric(e.to_string())
    }
}

impl From<StochasticError> for DiagError {
    fn from(e: StochasticError) -> Self {
        DiagError::Numeric(e.to_string())
    }
}

/// Fewest Monte-Carlo draws behind any correlation estimate.
pub const MIN_DRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub left: f64,
    pub right: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<HistBin>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for b in &self.bins {
            let _ = writeln!(s, "{},{},{}", b.left, b.right, b.count);
        }
        s
    }
}

/// Equal-width bins over `[0, 1]`; the last bin is closed on the right.
pub fn gate_histogram(values: &[f64], bins: usize) -> Result<Histogram, DiagError> {
    if bins < 2 {
        return Err(DiagError::Usage(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    if values.is_empty() {
        return Err(DiagError::Usage("no gate values to histogram".into()));
    }
    let mut counts = vec![0u64; bins];
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(DiagError::Numeric(format!("gate value {v} outside [0, 1]")));
        }
        counts[((v * bins as f64) as usize).min(bins - 1)] += 1;
    }
    Ok(Histogram {
        bins: counts
            .into_iter()
            .enumerate()
            .map(|(k, count)| HistBin {
                left: k as f64 / bins as f64,
                right: (k + 1) as f64 / bins as f64,
                count,
            })
            .collect(),
    })
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Monte-Carlo correlation of `(i, f)` at fixed shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// `None` when a gate has no variance.
    pub rho: Option<f64>,
    /// `(1 - ρ²)/√n`.
    pub se: Option<f64>,
    pub draws: usize,
    pub mean_i: f64,
    pub mean_f: f64,
}

/// `(i, f)` from one set of Gamma draws.
pub fn gate_pair(variant: Variant, u: &[f64]) -> Result<(f64, f64), DiagError> {
    if u.len() != variant.gamma_groups() || u.is_empty() {
        return Err(DiagError::Usage(format!(
            "{variant} takes {} Gamma draws, got {}",
            variant.gamma_groups(),
            u.len()
        )));
    }
    Ok(match variant {
        Variant::Blstm => (u[0] / (u[0] + u[1]), u[2] / (u[2] + u[3])),
        Variant::Bblstm3g => (u[0] / (u[0] + u[2]), u[1] / (u[1] + u[2])),
        _ => {
            let (a, b) = (u[0] + u[2], u[1] + u[3]);
            (a / (a + u[3] + u[4]), b / (b + u[2] + u[4]))
        }
    })
}

fn correlation_from(i: &[f64], f: &[f64]) -> Correlation {
    let n = i.len();
    let rho = pearson(i, f);
    Correlation {
        rho,
        se: rho.map(|r| (1.0 - r * r) / (n as f64).sqrt()),
        draws: n,
        mean_i: i.iter().sum::<f64>() / n as f64,
        mean_f: f.iter().sum::<f64>() / n as f64,
    }
}

/// Draw `n` fresh Gamma sets at `shapes` and correlate the gates.
pub fn gate_correlation(
    variant: Variant,
    shapes: &[f64],
    n: usize,
    rng: &mut RngStream,
) -> Result<Correlation, DiagError> {
    if !variant.is_beta() {
        return Err(DiagError::Usage(format!(
            "{variant} has deterministic or independent gates; correlation needs a Beta variant"
        )));
    }
    if n < MIN_DRAWS {
        return Err(DiagError::Usage(format!(
            "need at least {MIN_DRAWS} draws, got {n}"
        )));
    }
    let mut u = vec![0.0; shapes.len()];
    let (mut is, mut fs) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        for (x, &a) in u.iter_mut().zip(shapes) {
            *x = sample_gamma_value(a, rng)?;
        }
        let (i, f) = gate_pair(variant, &u)?;
        is.push(i);
        fs.push(f);
    }
    Ok(correlation_from(&is, &fs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub shapes: Vec<f64>,
    pub rho: f64,
}

/// Extremes of a random search over 5G shape configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub configs: usize,
    pub draws: usize,
    /// Shapes are drawn log-uniformly from this range.
    pub range: [f64; 2],
    pub min: SweepPoint,
    pub max: SweepPoint,
}

pub const SWEEP_RANGE: [f64; 2] = [0.05, 20.0];

/// Evaluate `configs` log-uniform 5G shape sets and keep the most negative
/// and most positive correlations.
pub fn correlation_sweep(
    configs: usize,
    draws: usize,
    seed: u64,
) -> Result<SweepReport, DiagError> {
    if configs == 0 {
        return Err(DiagError::Usage(
            "sweep needs at least one configuration".into(),
        ));
    }
    let root = RngStream::new(seed, 0x5eeb);
    let mut pick = root.split(0);
    let (lo, hi) = (SWEEP_RANGE[0].ln(), SWEEP_RANGE[1].ln());
    let mut min: Option<SweepPoint> = None;
    let mut max: Option<SweepPoint> = None;
    for k in 0..configs {
        let shapes: Vec<f64> = (0..5)
            .map(|_| (lo + (hi - lo) * pick.uniform()).exp())
            .collect();
        let c = gate_correlation(
            Variant::Bblstm5g,
            &shapes,
            draws,
            &mut root.split(1 + k as u64),
        )?;
        let Some(rho) = c.rho else { continue };
        if min.as_ref().map_or(true, |m| rho < m.rho) {
            min = Some(SweepPoint {
                shapes: shapes.clone(),
                rho,
            });
        }
        if max.as_ref().map_or(true, |m| rho > m.rho) {
            max = Some(SweepPoint { shapes, rho });
        }
    }
    match (min, max) {
        (Some(min), Some(max)) => Ok(SweepReport {
            seed,
            configs,
            draws,
            range: SWEEP_RANGE,
            min,
            max,
        }),
        _ => Err(DiagError::Numeric(
            "every sweep configuration had constant gates".into(),
        )),
    }
}

/// Per-timestep `‖∂L/∂c_t‖`, averaged over batch rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradFlow {
    pub norms: Vec<f64>,
    /// Largest forget-gate value seen in the pass.
    pub max_forget: f64,
}

impl GradFlow {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,norm\n");
        for (t, n) in self.norms.iter().enumerate() {
            let _ = writeln!(s, "{},{}", t + 1, n);
        }
        s
    }

    /// Whether every step back in time shrinks the norm by at least
    /// `factor` (pairs that have already underflowed to zero pass).
    pub fn decays_geometrically(&self, factor: f64) -> bool {
        self.norms.windows(2).all(|w| w[0] <= factor * w[1])
    }
}

/// Backpropagate the model loss on `batch` and measure the gradient with
/// respect to the top layer's cell state at every step.
pub fn gradient_norm_trace(
    model: &Model,
    params: &ParamStore,
    batch: &Batch,
    noise: &mut NoiseSource,
) -> Result<GradFlow, DiagError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let fwd = model.forward(&mut tape, &bound, batch, noise)?;
    let grads = tape.backward(fwd.loss)?;
    let top = fwd
        .unrolled
        .states
        .last()
        .ok_or_else(|| DiagError::Usage("model has no cell state".into()))?;
    let mut norms = Vec::with_capacity(top.len());
    for s in top {
        let v = tape.value(s.c);
        let (rows, cols) = (v.rows(), v.cols());
        let g = grads.get_or_zeros(s.c, v.len());
        let total: f64 = (0..rows)
            .map(|r| {
                g[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        norms.push(total / rows as f64);
    }
    let max_forget = fwd
        .unrolled
        .traces
        .iter()
        .flatten()
        .flat_map(|tr| tape.value(tr.f).data().iter().copied())
        .fold(0.0, f64::max);
    Ok(GradFlow { norms, max_forget })
}

/// Gate values gathered from forward passes over a split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateValues {
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
}

/// Collect every live `(i, f, o)` value over `split`.
pub fn collect_gates(
    model: &Model,
    params: &ParamStore,
    split: &Split,
    batch_size: usize,
    mut noise: impl FnMut(usize) -> NoiseSource,
) -> Result<GateValues, DiagError> {
    let mut out = GateValues::default();
    for (k, idx) in crate::data::batch_indices(split.len(), batch_size, false, 0, 0)
        .iter()
        .enumerate()
    {
        let batch = split.batch(idx);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let fwd = model.forward(&mut tape, &bound, &batch, &mut noise(k))?;
        for layer in &fwd.unrolled.traces {
            for (t, tr) in layer.iter().enumerate() {
                let live = batch.live(t);
                for (dst, v) in [(&mut out.i, tr.i), (&mut out.f, tr.f), (&mut out.o, tr.o)] {
                    let val = tape.value(v);
                    for (r, &ok) in live.iter().enumerate() {
                        if ok {
                            dst.extend_from_slice(val.row(r));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Monte-Carlo correlation at the shapes a model infers along one
/// sequence: for each step, `ρ` per hidden unit averaged over units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCorrelation {
    pub t: usize,
    pub mean_i: f64,
    pub mean_f: f64,
    /// Mean of the defined per-unit correlations.
    pub rho: Option<f64>,
    /// Standard error of that mean, treating units as independent.
    pub se: Option<f64>,
    pub draws: usize,
}

pub fn step_correlations_csv(rows: &[StepCorrelation]) -> String {
    let mut s = String::from("t,i_mean,f_mean,rho,se,draws\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.t + 1,
            r.mean_i,
            r.mean_f,
            opt(r.rho),
            opt(r.se),
            r.draws
        );
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

/// Correlations along row `row` of `batch` under the model's own shapes.
/// Shapes come from a mean-mode pass.
pub fn sequence_correlation(
    model: &Model,
    params: &ParamStore,
    batch: &Batch,
    row: usize,
    draws: usize,
    seed: u64,
) -> Result<Vec<StepCorrelation>, DiagError> {
    let variant = model.stack.variant;
    if !variant.is_beta() {
        return Err(DiagError::Usage(format!(
            "correlation needs a Beta variant, not {variant}"
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let fwd = model.forward(&mut tape, &bound, batch, &mut NoiseSource::Mean)?;
    let traces = fwd.unrolled.traces.last().expect("at least one layer");
    let root = RngStream::new(seed, 0xc022);
    let mut out = Vec::new();
    for (t, tr) in traces.iter().enumerate() {
        if !batch.live(t)[row] {
            break;
        }
        let h = model.stack.hidden;
        let shapes: Vec<&[f64]> = tr.shapes.iter().map(|s| tape.value(*s).row(row)).collect();
        let (mut rhos, mut ses, mut mi, mut mf) = (Vec::new(), Vec::new(), 0.0, 0.0);
        for unit in 0..h {
            let s: Vec<f64> = shapes.iter().map(|r| r[unit]).collect();
            let mut rng = root.split((t * h + unit) as u64);
            let c = gate_correlation(variant, &s, draws, &mut rng)?;
            mi += c.mean_i / h as f64;
            mf += c.mean_f / h as f64;
            if let (Some(r), Some(se)) = (c.rho, c.se) {
                rhos.push(r);
                ses.push(se);
            }
        }
        let k = rhos.len() as f64;
        out.push(StepCorrelation {
            t,
            mean_i: mi,
            mean_f: mf,
            rho: (k > 0.0).then(|| rhos.iter().sum::<f64>() / k),
            se: (k > 0.0).then(|| (ses.iter().map(|s| s * s).sum::<f64>()).sqrt() / k),
            draws,
        });
    }
    Ok(out)
}

/// Per-step gate statistics on the two-regime task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeStep {
    pub seq: usize,
    pub t: usize,
    pub regime: u8,
    pub mean_i: f64,
    pub mean_f: f64,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime: u8,
    pub steps: usize,
    pub mean_i: f64,
    pub mean_f: f64,
    pub mean_rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    /// Training accuracy of the model behind the report, if trained.
    pub train_accuracy: Option<f64>,
    pub steps: Vec<RegimeStep>,
    pub summary: Vec<RegimeSummary>,
}

impl RegimeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seq,t,regime,i_mean,f_mean,rho\n");
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.seq,
                r.t + 1,
                r.regime,
                r.mean_i,
                r.mean_f,
                opt(r.rho)
            );
        }
        s
    }

    pub fn summary_for(&self, regime: u8) -> Option<&RegimeSummary> {
        self.summary.iter().find(|s| s.regime == regime)
    }
}

/// Gate means and correlation along `sequences` test sequences of the
/// two-regime task, under the given parameters.
pub fn regime_report(
    model: &Model,
    params: &ParamStore,
    data: &TaskData,
    sequences: usize,
    draws: usize,
    seed: u64,
    train_accuracy: Option<f64>,
) -> Result<RegimeReport, DiagError> {
    let split = data.test.as_ref().unwrap_or(&data.valid);
    let Split::Regimes(seqs) = split else {
        return Err(DiagError::Usage(
            "the regime report needs the synthetic task".into(),
        ));
    };
    let mut steps = Vec::new();
    for k in 0..sequences.min(seqs.len()) {
        let batch = split.batch(&[k]);
        let rows =
            sequence_correlation(model, params, &batch, 0, draws, seed.wrapping_add(k as u64))?;
        for r in rows {
            steps.push(RegimeStep {
                seq: k,
                t: r.t,
                regime: seqs[k].regimes[r.t],
                mean_i: r.mean_i,
                mean_f: r.mean_f,
                rho: r.rho,
            });
        }
    }
    let summary = [0u8, 1]
        .into_iter()
        .filter_map(|regime| {
            let sel: Vec<&RegimeStep> = steps.iter().filter(|s| s.regime == regime).collect();
            if sel.is_empty() {
                return None;
            }
            let n = sel.len() as f64;
            let rhos: Vec<f64> = sel.iter().filter_map(|s| s.rho).collect();
            Some(RegimeSummary {
                regime,
                steps: sel.len(),
                mean_i: sel.iter().map(|s| s.mean_i).sum::<f64>() / n,
                mean_f: sel.iter().map(|s| s.mean_f).sum::<f64>() / n,
                mean_rho: (!rhos.is_empty()).then(|| rhos.iter().sum::<f64>() / rhos.len() as f64),
            })
        })
        .collect();
    Ok(RegimeReport {
        train_accuracy,
        steps,
        summary,
    })
}

/// Train the configured 5G-family model on the two-regime task, then
/// report gate statistics per regime. `cfg.out_dir` receives the run.
pub fn synthetic_correlation_demo(
    cfg: &RunConfig,
    sequences: usize,
    draws: usize,
) -> Result<RegimeReport, DiagError> {
    if cfg.task != Task::Synthetic {
        return Err(DiagError::Usage(format!(
            "the synthetic demo runs the synthetic task, not {}",
            cfg.task
        )));
    }
    if !matches!(cfg.variant, Variant::Bblstm5g | Variant::Bblstm5gp) {
        return Err(DiagError::Usage(format!(
            "the synthetic demo needs bblstm5g or bblstm5gp, not {}",
            cfg.variant
        )));
    }
    let data = run::load_task_data(cfg)?;
    let summary = run::train_on(cfg, &data)?;
    let (model, params) = run::load_model(cfg, &data, &summary.out_dir.join("last.ckpt"))?;
    let acc = run::split_metric(
        &model,
        &params,
        &data.train,
        cfg.batch_size,
        cfg.eval_mode,
        cfg.seeds.sampler,
        0,
    )?;
    regime_report(
        &model,
        &params,
        &data,
        sequences,
        draws,
        cfg.seeds.sampler,
        Some(acc),
    )
}
