//! Recurrent cells: LSTM, CIFG, Gumbel-gate LSTM and the Beta-gate family.
//!
//! Every variant reads `concat(x_t, h_{t-1})` through one fused affine map.
//! Column blocks of that map, each `hidden` wide:
//!
//! | variant            | blocks                  |
//! |--------------------|-------------------------|
//! | `lstm`, `g2lstm`   | `i f o c̃`               |
//! | `cifg`             | `i o c̃`                 |
//! | Beta variants      | `o c̃ g_1 … g_k`         |
//!
//! For Beta variants `g_j` is the first layer of the shape network for
//! group `j`; deeper networks add per-group `hidden × hidden` layers named
//! `g{j}.w{d}` / `g{j}.b{d}`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::{PriorMode, PriorSpec, SHAPE_FLOOR};
use crate::stochastic::{NoiseSource, RngStream};
use crate::tape::{BoundParams, ParamStore, PriorShape, Tape, TapeError, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CellError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("unknown cell variant {0:?} (expected one of lstm, cifg, g2lstm, blstm, bblstm3g, bblstm5g, bblstm5gp)")]
    UnknownVariant(String),
    #[error("invalid cell configuration: {0}")]
    Config(String),
    #[error("cannot unroll an empty sequence")]
    EmptySequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Lstm,
    Cifg,
    G2Lstm,
    Blstm,
    Bblstm3g,
    Bblstm5g,
    Bblstm5gp,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Lstm,
        Variant::Cifg,
        Variant::G2Lstm,
        Variant::Blstm,
        Variant::Bblstm3g,
        Variant::Bblstm5g,
        Variant::Bblstm5gp,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Variant::Lstm => "lstm",
            Variant::Cifg => "cifg",
            Variant::G2Lstm => "g2lstm",
            Variant::Blstm => "blstm",
            Variant::Bblstm3g => "bblstm3g",
            Variant::Bblstm5g => "bblstm5g",
            Variant::Bblstm5gp => "bblstm5gp",
        }
    }

    /// Number of Gamma groups, zero for sigmoid-gated variants.
    pub fn gamma_groups(self) -> usize {
        match self {
            Variant::Lstm | Variant::Cifg | Variant::G2Lstm => 0,
            Variant::Blstm => 4,
            Variant::Bblstm3g => 3,
            Variant::Bblstm5g | Variant::Bblstm5gp => 5,
        }
    }

    pub fn is_beta(self) -> bool {
        self.gamma_groups() > 0
    }

    /// Whether the forward pass draws noise in sampling mode.
    pub fn is_stochastic(self) -> bool {
        self.is_beta() || self == Variant::G2Lstm
    }

    pub fn has_prior(self) -> bool {
        self == Variant::Bblstm5gp
    }

    /// Width of the fused affine map in units of `hidden`.
    fn blocks(self) -> usize {
        match self {
            Variant::Lstm | Variant::G2Lstm => 4,
            Variant::Cifg => 3,
            v => 2 + v.gamma_groups(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = CellError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| CellError::UnknownVariant(s.to_string()))
    }
}

impl TryFrom<String> for Variant {
    type Error = CellError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.id().to_string()
    }
}

/// Configuration of one stacked recurrent network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub variant: Variant,
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Layers per Gamma shape network.
    pub gate_depth: usize,
    /// Temperature of concrete gates.
    pub tau: f64,
    /// Initial log-odds of the forget gate at zero input.
    #[serde(default = "default_forget_bias")]
    pub forget_bias: f64,
    /// Initial log-odds of the input gate at zero input.
    #[serde(default)]
    pub input_bias: f64,
}

fn default_forget_bias() -> f64 {
    1.0
}

impl StackConfig {
    pub fn new(variant: Variant, input_dim: usize, hidden: usize) -> Self {
        StackConfig {
            variant,
            input_dim,
            hidden,
            layers: 1,
            gate_depth: 1,
            tau: 0.5,
            forget_bias: 1.0,
            input_bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), CellError> {
        if self.input_dim == 0 || self.hidden == 0 || self.layers == 0 || self.gate_depth == 0 {
            return Err(CellError::Config(format!(
                "input_dim, hidden, layers and gate_depth must be positive (got {}, {}, {}, {})",
                self.input_dim, self.hidden, self.layers, self.gate_depth
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(CellError::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !self.forget_bias.is_finite() || !self.input_bias.is_finite() {
            return Err(CellError::Config("gate biases must be finite".into()));
        }
        Ok(())
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden
        }
    }

    /// Create every recurrent parameter of the stack in `store`.
    pub fn init_params(
        &self,
        store: &mut ParamStore,
        rng: &mut RngStream,
    ) -> Result<(), CellError> {
        self.validate()?;
        let h = self.hidden;
        for l in 0..self.layers {
            let fan_in = self.layer_input(l) + h;
            let width = self.variant.blocks() * h;
            let bound = 1.0 / (fan_in as f64).sqrt();
            store.insert(format!("layer{l}.w"), uniform(rng, &[fan_in, width], bound));
            let mut b = vec![0.0; width];
            if matches!(self.variant, Variant::Lstm | Variant::G2Lstm) {
                b[..h].iter_mut().for_each(|x| *x = self.input_bias);
                b[h..2 * h].iter_mut().for_each(|x| *x = self.forget_bias);
            }
            if self.variant == Variant::Cifg {
                b[..h].iter_mut().for_each(|x| *x = self.input_bias);
            }
            let shape_bias = self.shape_bias();
            if self.gate_depth == 1 {
                for (j, &v) in shape_bias.iter().enumerate() {
                    b[(2 + j) * h..(3 + j) * h].iter_mut().for_each(|x| *x = v);
                }
            }
            store.insert(format!("layer{l}.b"), Tensor::new(vec![width], b)?);
            for j in 1..=self.variant.gamma_groups() {
                for d in 1..self.gate_depth {
                    let bound = 1.0 / (h as f64).sqrt();
                    store.insert(format!("layer{l}.g{j}.w{d}"), uniform(rng, &[h, h], bound));
                    let last = d + 1 == self.gate_depth;
                    let v = if last { shape_bias[j - 1] } else { 0.0 };
                    store.insert(format!("layer{l}.g{j}.b{d}"), Tensor::full(&[h], v));
                }
            }
        }
        Ok(())
    }

    /// Pre-softplus bias of each Gamma group such that, at zero input, the
    /// ratio-of-means gates have log-odds `input_bias` and `forget_bias`.
    /// Groups not pinned by the two targets sit at `softplus(0)`.
    fn shape_bias(&self) -> Vec<f64> {
        let s0 = std::f64::consts::LN_2;
        let (bi, bf) = (self.input_bias, self.forget_bias);
        let shapes = match self.variant {
            Variant::Blstm => vec![
                s0 * (bi / 2.0).exp(),
                s0 * (-bi / 2.0).exp(),
                s0 * (bf / 2.0).exp(),
                s0 * (-bf / 2.0).exp(),
            ],
            Variant::Bblstm3g => vec![s0 * bi.exp(), s0 * bf.exp(), s0],
            Variant::Bblstm5g | Variant::Bblstm5gp => {
                let c = s0 * bf.exp();
                let u1 = (bi.exp() * (c + s0) - s0).max(MIN_INIT_SHAPE);
                vec![u1, c, s0, c, s0]
            }
            _ => Vec::new(),
        };
        shapes
            .into_iter()
            .map(|u| inverse_softplus((u - SHAPE_FLOOR).max(MIN_INIT_SHAPE)))
            .collect()
    }
}

const MIN_INIT_SHAPE: f64 = 0.01;

fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

fn uniform(rng: &mut RngStream, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
            .collect(),
    )
    .expect("shape")
}

/// Names of the learnable prior parameters in feature-kernel mode.
pub const PRIOR_LOG_LEN: &str = "prior.log_len";
pub const PRIOR_LOG_SCALE: &str = "prior.log_scale";

/// Add the kernel-prior parameters when `spec` asks for them.
pub fn init_prior_params(store: &mut ParamStore, spec: &PriorSpec) {
    if spec.mode == PriorMode::FeatureKernel {
        store.insert(PRIOR_LOG_LEN, Tensor::scalar(spec.length_scale.ln()));
        store.insert(PRIOR_LOG_SCALE, Tensor::scalar(spec.output_scale.ln()));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CellState {
    pub c: Var,
    pub h: Var,
}

impl CellState {
    pub fn zeros(tape: &mut Tape, batch: usize, hidden: usize) -> Result<Self, TapeError> {
        let c = tape.leaf(Tensor::zeros(&[batch, hidden]))?;
        let h = tape.leaf(Tensor::zeros(&[batch, hidden]))?;
        Ok(CellState { c, h })
    }
}

/// Gate activity of one step.
#[derive(Debug, Clone)]
pub struct GateTrace {
    pub i: Var,
    pub f: Var,
    pub o: Var,
    /// Gamma draws `u^{(1..k)}` (Beta variants).
    pub u: Vec<Var>,
    /// Gamma shapes `U^{(1..k)}` (Beta variants).
    pub shapes: Vec<Var>,
    /// Batch-averaged KL of this step (prior variant).
    pub kl: Option<Var>,
}

/// Prior inputs to one step of the prior variant.
#[derive(Debug, Clone, Copy)]
pub struct StepPrior<'a> {
    pub spec: &'a PriorSpec,
    /// `(log_len, log_scale, squared feature distances per row)` in
    /// feature-kernel mode.
    pub kernel: Option<(Var, Var, &'a [f64])>,
    /// Per-row KL weights (`1/batch` for live rows, 0 for finished ones).
    pub row_weights: &'a [f64],
}

/// One layer of a stack, bound to its parameters.
#[derive(Debug, Clone, Copy)]
pub struct Cell<'a> {
    pub cfg: &'a StackConfig,
    pub layer: usize,
}

impl<'a> Cell<'a> {
    pub fn new(cfg: &'a StackConfig, layer: usize) -> Self {
        Cell { cfg, layer }
    }

    fn name(&self, suffix: &str) -> String {
        format!("layer{}.{suffix}", self.layer)
    }

    /// Advance one step from `state` on input `x` (`batch × input`).
    pub fn step(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: Var,
        state: &CellState,
        noise: &mut NoiseSource,
        prior: Option<StepPrior<'_>>,
    ) -> Result<(CellState, GateTrace), CellError> {
        let h = self.cfg.hidden;
        let z = tape.concat(&[x, state.h])?;
        let a = tape.matmul(z, params.var(&self.name("w"))?)?;
        let a = tape.add(a, params.var(&self.name("b"))?)?;
        let block = |tape: &mut Tape, k: usize| tape.slice(a, k * h, h);

        let variant = self.cfg.variant;
        let (i, f, o, cand, u, shapes) = match variant {
            Variant::Lstm | Variant::Cifg | Variant::G2Lstm => {
                let pre_i = block(tape, 0)?;
                let off = if variant == Variant::Cifg { 0 } else { 1 };
                let o = block(tape, 1 + off)?;
                let o = tape.sigmoid(o)?;
                let cand = block(tape, 2 + off)?;
                let cand = tape.tanh(cand)?;
                let (i, f) = match variant {
                    Variant::Lstm => {
                        let pre_f = block(tape, 1)?;
                        (tape.sigmoid(pre_i)?, tape.sigmoid(pre_f)?)
                    }
                    Variant::Cifg => {
                        let i = tape.sigmoid(pre_i)?;
                        (i, tape.one_minus(i)?)
                    }
                    _ => {
                        let pre_f = block(tape, 1)?;
                        (
                            concrete(tape, pre_i, self.cfg.tau, noise)?,
                            concrete(tape, pre_f, self.cfg.tau, noise)?,
                        )
                    }
                };
                (i, f, o, cand, Vec::new(), Vec::new())
            }
            _ => {
                let o = block(tape, 0)?;
                let o = tape.sigmoid(o)?;
                let cand = block(tape, 1)?;
                let cand = tape.tanh(cand)?;
                let k = variant.gamma_groups();
                let mut shapes = Vec::with_capacity(k);
                let mut u = Vec::with_capacity(k);
                for j in 1..=k {
                    let pre = block(tape, 1 + j)?;
                    let s = self.shape_net(tape, params, pre, j)?;
                    u.push(tape.gamma(s, noise)?);
                    shapes.push(s);
                }
                let (i, f) = beta_gates(tape, variant, &u)?;
                (i, f, o, cand, u, shapes)
            }
        };

        let fc = tape.mul(f, state.c)?;
        let ic = tape.mul(i, cand)?;
        let c = tape.add(fc, ic)?;
        let tc = tape.tanh(c)?;
        let hn = tape.mul(o, tc)?;

        let kl = match (variant.has_prior(), prior) {
            (true, Some(p)) => Some(step_kl(tape, &shapes, p)?),
            (true, None) => {
                return Err(CellError::Config("the prior variant needs a prior".into()))
            }
            _ => None,
        };
        Ok((
            CellState { c, h: hn },
            GateTrace {
                i,
                f,
                o,
                u,
                shapes,
                kl,
            },
        ))
    }

    /// `softplus(net_j(pre)) + ε` where `pre` is the first-layer output.
    fn shape_net(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        pre: Var,
        j: usize,
    ) -> Result<Var, CellError> {
        let mut a = pre;
        for d in 1..self.cfg.gate_depth {
            let hidden = tape.tanh(a)?;
            let w = params.var(&self.name(&format!("g{j}.w{d}")))?;
            let b = params.var(&self.name(&format!("g{j}.b{d}")))?;
            let z = tape.matmul(hidden, w)?;
            a = tape.add(z, b)?;
        }
        let sp = tape.softplus(a)?;
        Ok(tape.affine(sp, 1.0, SHAPE_FLOOR)?)
    }
}

/// Relaxed Bernoulli gate `σ((pre + L)/τ)`, `L` logistic noise (the
/// difference of two Gumbel draws). `Mean` noise gives `σ(pre/τ)`.
fn concrete(
    tape: &mut Tape,
    pre: Var,
    tau: f64,
    noise: &mut NoiseSource,
) -> Result<Var, CellError> {
    let shape = tape.value(pre).shape().to_vec();
    let n = tape.value(pre).len();
    let mut l = Vec::with_capacity(n);
    for _ in 0..n {
        l.push(noise.logistic().map_err(TapeError::from)?);
    }
    let lv = tape.leaf(Tensor::new(shape, l)?)?;
    let z = tape.add(pre, lv)?;
    let z = tape.scale(z, 1.0 / tau)?;
    Ok(tape.sigmoid(z)?)
}

/// Input and forget gates from Gamma draws.
pub fn beta_gates(tape: &mut Tape, variant: Variant, u: &[Var]) -> Result<(Var, Var), TapeError> {
    let ratio = |tape: &mut Tape, num: &[Var], rest: &[Var]| -> Result<Var, TapeError> {
        let n = if num.len() == 1 {
            num[0]
        } else {
            tape.add_n(num)?
        };
        let all: Vec<Var> = num.iter().chain(rest).copied().collect();
        let d = tape.add_n(&all)?;
        tape.div(n, d)
    };
    match variant {
        Variant::Blstm => Ok((
            ratio(tape, &[u[0]], &[u[1]])?,
            ratio(tape, &[u[2]], &[u[3]])?,
        )),
        Variant::Bblstm3g => Ok((
            ratio(tape, &[u[0]], &[u[2]])?,
            ratio(tape, &[u[1]], &[u[2]])?,
        )),
        Variant::Bblstm5g | Variant::Bblstm5gp => {
            let i = ratio(tape, &[u[0], u[2]], &[u[3], u[4]])?;
            let f = ratio(tape, &[u[1], u[3]], &[u[2], u[4]])?;
            Ok((i, f))
        }
        v => Err(TapeError::Invalid {
            op: "beta_gates",
            detail: format!("{v} has no Beta gates"),
        }),
    }
}

/// `Σ_j Σ_units KL(Gamma(U_j, 1) ‖ prior_j)`, weighted over rows.
fn step_kl(tape: &mut Tape, shapes: &[Var], prior: StepPrior<'_>) -> Result<Var, CellError> {
    let mut terms = Vec::with_capacity(shapes.len());
    for (j, &s) in shapes.iter().enumerate() {
        let rate = prior.spec.rate[j];
        let p = match (prior.kernel, j) {
            (Some((log_len, log_scale, dist2)), 0 | 1) => {
                let cols = tape.value(s).cols();
                PriorShape::Node(tape.rbf_shape(dist2.to_vec(), cols, log_len, log_scale)?)
            }
            _ => PriorShape::Const(prior.spec.shape[j]),
        };
        let kl = tape.kl_gamma(s, p, rate)?;
        let cols = tape.value(kl).cols();
        let w: Vec<f64> = prior
            .row_weights
            .iter()
            .flat_map(|&w| std::iter::repeat(w).take(cols))
            .collect();
        terms.push(tape.weighted_sum(kl, w)?);
    }
    Ok(tape.add_n(&terms)?)
}

/// Per-step inputs of an unroll.
#[derive(Debug, Clone, Copy)]
pub struct UnrollArgs<'a> {
    /// Valid length of each batch row; rows are frozen past their end.
    pub lengths: Option<&'a [usize]>,
    /// Prior settings for the prior variant.
    pub prior: Option<&'a PriorSpec>,
    /// Squared feature distances `[t][row]` for the kernel prior.
    pub dist2: Option<&'a [Vec<f64>]>,
}

impl Default for UnrollArgs<'_> {
    fn default() -> Self {
        UnrollArgs {
            lengths: None,
            prior: None,
            dist2: None,
        }
    }
}

/// Result of unrolling a stack over a sequence.
#[derive(Debug, Clone)]
pub struct Unrolled {
    /// Top-layer hidden state after each step.
    pub outputs: Vec<Var>,
    /// `states[layer][t]`.
    pub states: Vec<Vec<CellState>>,
    /// `traces[layer][t]`.
    pub traces: Vec<Vec<GateTrace>>,
    /// Total KL over steps and layers (prior variant).
    pub kl_sum: Option<Var>,
    /// Top-layer initial state.
    pub initial: CellState,
}

/// Run the stack over `inputs` (`T` tensors of `batch × input_dim`).
pub fn unroll(
    cfg: &StackConfig,
    tape: &mut Tape,
    params: &BoundParams,
    inputs: &[Var],
    noise: &mut NoiseSource,
    args: UnrollArgs<'_>,
) -> Result<Unrolled, CellError> {
    let first = inputs.first().ok_or(CellError::EmptySequence)?;
    let batch = tape.value(*first).rows();
    if let Some(l) = args.lengths {
        if l.len() != batch {
            return Err(CellError::Config(format!(
                "{} lengths for batch of {batch}",
                l.len()
            )));
        }
    }
    let spec = match (cfg.variant.has_prior(), args.prior) {
        (true, Some(s)) => Some(s),
        (true, None) => return Err(CellError::Config("the prior variant needs a prior".into())),
        _ => None,
    };
    let kernel_params = match spec {
        Some(s) if s.mode == PriorMode::FeatureKernel => {
            if args.dist2.map_or(true, |d| d.len() < inputs.len()) {
                return Err(CellError::Config(
                    "feature-kernel prior needs a distance row per step".into(),
                ));
            }
            Some((params.var(PRIOR_LOG_LEN)?, params.var(PRIOR_LOG_SCALE)?))
        }
        _ => None,
    };

    let mut layer_inputs = inputs.to_vec();
    let mut states = Vec::with_capacity(cfg.layers);
    let mut traces = Vec::with_capacity(cfg.layers);
    let mut kl_terms = Vec::new();
    let mut initial = None;
    for l in 0..cfg.layers {
        let cell = Cell::new(cfg, l);
        let mut state = CellState::zeros(tape, batch, cfg.hidden)?;
        initial = Some(state);
        let mut ls = Vec::with_capacity(inputs.len());
        let mut lt = Vec::with_capacity(inputs.len());
        for (t, &x) in layer_inputs.iter().enumerate() {
            let mask: Option<Vec<bool>> =
                args.lengths.map(|len| len.iter().map(|&n| t < n).collect());
            let row_weights: Vec<f64> = match &mask {
                Some(m) => m
                    .iter()
                    .map(|&live| if live { 1.0 / batch as f64 } else { 0.0 })
                    .collect(),
                None => vec![1.0 / batch as f64; batch],
            };
            let prior = spec.map(|s| StepPrior {
                spec: s,
                kernel: kernel_params
                    .map(|(a, b)| (a, b, args.dist2.expect("checked")[t].as_slice())),
                row_weights: &row_weights,
            });
            let (mut next, trace) = cell.step(tape, params, x, &state, noise, prior)?;
            if let Some(m) = &mask {
                if m.iter().any(|&live| !live) {
                    next = CellState {
                        c: tape.select_rows(m, next.c, state.c)?,
                        h: tape.select_rows(m, next.h, state.h)?,
                    };
                }
            }
            if let Some(kl) = trace.kl {
                kl_terms.push(kl);
            }
            state = next;
            ls.push(state);
            lt.push(trace);
        }
        layer_inputs = ls.iter().map(|s| s.h).collect();
        states.push(ls);
        traces.push(lt);
    }
    let kl_sum = if kl_terms.is_empty() {
        None
    } else {
        Some(tape.add_n(&kl_terms)?)
    };
    Ok(Unrolled {
        outputs: layer_inputs,
        states,
        traces,
        kl_sum,
        initial: initial.expect("layers >= 1"),
    })
}
