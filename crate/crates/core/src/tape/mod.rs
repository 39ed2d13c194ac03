//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation in execution order; [`Tape::backward`]
//! walks the records in exact reverse and accumulates gradients for every
//! node. Handles into the tape are plain indices ([`Var`]).
//!
//! Gamma nodes are the one stochastic primitive: the forward pass draws
//! from a [`NoiseSource`] and stores `du/dα` per element, and the backward
//! pass multiplies the upstream gradient by it.

mod params;
mod tensor;

pub mod gradcheck;

pub use params::{BoundParams, CheckpointError, ParamStore, CHECKPOINT_MAGIC};
pub use tensor::Tensor;

use thiserror::Error;

use crate::objectives;
use crate::special;
use crate::stochastic::{NoiseSource, StochasticError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapeError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    Length { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error(transparent)]
    Stochastic(#[from] StochasticError),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Prior shape argument of a KL node.
#[derive(Debug, Clone, Copy)]
pub enum PriorShape {
    Const(f64),
    Node(Var),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Concat(Vec<Var>),
    Slice {
        src: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    AddN(Vec<Var>),
    WeightedSum(Var, Vec<f64>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        mask: Vec<bool>,
        on: Var,
        off: Var,
    },
    Gamma {
        shape: Var,
        dudalpha: Vec<f64>,
    },
    KlGamma {
        q: Var,
        prior: PriorShape,
        rate: f64,
    },
    RbfShape {
        dist2: Vec<f64>,
        log_len: Var,
        log_scale: Var,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of the loss with respect to `v`, zeros when unused.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len])
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TapeError {
    TapeError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::stochastic::sigmoid(x)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, with optional transposes
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n)
    // and `c` (m×n, row-major); callers pass slices of exactly those sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, TapeError> {
        if !value.is_finite() {
            return Err(TapeError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record an input (parameter or constant).
    pub fn leaf(&mut self, t: Tensor) -> Result<Var, TapeError> {
        self.push("leaf", t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            ta.data(),
            k as isize,
            1,
            tb.data(),
            n as isize,
            1,
            &mut out,
        );
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    /// Elementwise sum; a 1-D right operand whose length matches the last
    /// dimension of the left one is broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let out: Vec<f64> = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x + y)
                .collect();
            let t = Tensor::new(ta.shape().to_vec(), out)?;
            return self.push("add", t, Op::Add(a, b));
        }
        if tb.shape().len() == 1 && tb.len() == ta.cols() {
            let c = ta.cols();
            let out: Vec<f64> = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + tb.data()[i % c])
                .collect();
            let t = Tensor::new(ta.shape().to_vec(), out)?;
            return self.push("add", t, Op::AddRow(a, b));
        }
        Err(shape_err("add", ta, tb))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TapeError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Tensor::new(
            ta.shape().to_vec(),
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| f(x)).collect(),
        )
        .expect("same shape")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let t = self.zip_same("div", a, b, |x, y| x / y)?;
        self.push("div", t, Op::Div(a, b))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, TapeError> {
        let t = self.map(a, |x| scale * x + shift);
        self.push("affine", t, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TapeError> {
        self.affine(a, s, 0.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var, TapeError> {
        self.affine(a, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TapeError> {
        let t = self.map(a, sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TapeError> {
        let t = self.map(a, f64::tanh);
        self.push("tanh", t, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, TapeError> {
        let t = self.map(a, softplus);
        self.push("softplus", t, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TapeError> {
        let t = self.map(a, |x| x.max(0.0));
        self.push("relu", t, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TapeError> {
        let t = self.map(a, f64::exp);
        self.push("exp", t, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, TapeError> {
        let t = self.map(a, f64::ln);
        self.push("ln", t, Op::Ln(a))
    }

    /// Concatenate along the last axis; all parts need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        let first = parts.first().ok_or(TapeError::Invalid {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let rows = self.value(*first).rows();
        let lead = self.value(*first).shape()[..self.value(*first).shape().len() - 1].to_vec();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows || t.shape().len() != lead.len() + 1 {
                return Err(shape_err("concat", self.value(*first), t));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        self.push("concat", t, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..start + width` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, width: usize) -> Result<Var, TapeError> {
        let ta = self.value(a);
        let c = ta.cols();
        if start + width > c || width == 0 {
            return Err(TapeError::Invalid {
                op: "slice",
                detail: format!("columns {start}..{} of {c}", start + width),
            });
        }
        let mut out = Vec::with_capacity(ta.rows() * width);
        for r in 0..ta.rows() {
            out.extend_from_slice(&ta.row(r)[start..start + width]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = width;
        let t = Tensor::new(shape, out)?;
        self.push("slice", t, Op::Slice { src: a, start })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TapeError> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TapeError> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a))
    }

    /// Sum of equally shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        let first = parts.first().ok_or(TapeError::Invalid {
            op: "add_n",
            detail: "no inputs".into(),
        })?;
        let mut acc = self.value(*first).clone();
        for &p in &parts[1..] {
            let t = self.value(p);
            if t.shape() != acc.shape() {
                return Err(shape_err("add_n", &acc, t));
            }
            for (x, y) in acc.data_mut().iter_mut().zip(t.data()) {
                *x += y;
            }
        }
        self.push("add_n", acc, Op::AddN(parts.to_vec()))
    }

    /// Scalar `Σ w_i a_i`.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var, TapeError> {
        let ta = self.value(a);
        if weights.len() != ta.len() {
            return Err(TapeError::Shape {
                op: "weighted_sum",
                lhs: ta.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = ta.data().iter().zip(&weights).map(|(x, w)| x * w).sum();
        self.push(
            "weighted_sum",
            Tensor::scalar(s),
            Op::WeightedSum(a, weights),
        )
    }

    /// Rows `ids` of a `V × E` table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TapeError> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(TapeError::Invalid {
                op: "gather_rows",
                detail: format!("table shape {:?}", t.shape()),
            });
        }
        let (v, e) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(TapeError::Invalid {
                    op: "gather_rows",
                    detail: format!("id {id} out of range for {v} rows"),
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let t = Tensor::matrix(ids.len(), e, out)?;
        self.push(
            "gather_rows",
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Row-wise choice: row `r` comes from `on` when `mask[r]`, else `off`.
    pub fn select_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var, TapeError> {
        let (ta, tb) = (self.value(on), self.value(off));
        if ta.shape() != tb.shape() || ta.rows() != mask.len() {
            return Err(shape_err("select_rows", ta, tb));
        }
        let c = ta.cols();
        let mut out = Vec::with_capacity(ta.len());
        for (r, &m) in mask.iter().enumerate() {
            out.extend_from_slice(if m {
                &ta.data()[r * c..(r + 1) * c]
            } else {
                &tb.data()[r * c..(r + 1) * c]
            });
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(
            "select_rows",
            t,
            Op::SelectRows {
                mask: mask.to_vec(),
                on,
                off,
            },
        )
    }

    /// Elementwise Gamma(shape, 1) draws from `noise`.
    pub fn gamma(&mut self, shape: Var, noise: &mut NoiseSource) -> Result<Var, TapeError> {
        let ts = self.value(shape);
        let mut vals = Vec::with_capacity(ts.len());
        let mut grads = Vec::with_capacity(ts.len());
        for &a in ts.data() {
            let d = noise.gamma(a)?;
            vals.push(d.value);
            grads.push(d.pathwise_grad);
        }
        let t = Tensor::new(ts.shape().to_vec(), vals)?;
        self.push(
            "gamma",
            t,
            Op::Gamma {
                shape,
                dudalpha: grads,
            },
        )
    }

    /// Elementwise KL(Gamma(q, 1) ‖ Gamma(prior, rate)).
    pub fn kl_gamma(&mut self, q: Var, prior: PriorShape, rate: f64) -> Result<Var, TapeError> {
        let tq = self.value(q);
        let pv: Option<&Tensor> = match prior {
            PriorShape::Const(_) => None,
            PriorShape::Node(p) => {
                let tp = self.value(p);
                if tp.shape() != tq.shape() {
                    return Err(shape_err("kl_gamma", tq, tp));
                }
                Some(tp)
            }
        };
        let mut out = Vec::with_capacity(tq.len());
        for (i, &a) in tq.data().iter().enumerate() {
            let p = match (prior, pv) {
                (PriorShape::Const(c), _) => c,
                (_, Some(t)) => t.data()[i],
                _ => unreachable!(),
            };
            out.push(
                objectives::kl_gamma(a, p, rate).map_err(|e| TapeError::Invalid {
                    op: "kl_gamma",
                    detail: e.to_string(),
                })?,
            );
        }
        let t = Tensor::new(tq.shape().to_vec(), out)?;
        self.push("kl_gamma", t, Op::KlGamma { q, prior, rate })
    }

    /// RBF-kernel prior shapes: row `r` is filled with
    /// `exp(log_scale) · exp(-dist2[r] / (2 exp(log_len)^2)) + ε`.
    pub fn rbf_shape(
        &mut self,
        dist2: Vec<f64>,
        cols: usize,
        log_len: Var,
        log_scale: Var,
    ) -> Result<Var, TapeError> {
        let (ll, ls) = (self.value(log_len), self.value(log_scale));
        if !ll.is_scalar() || !ls.is_scalar() {
            return Err(shape_err("rbf_shape", ll, ls));
        }
        let len = ll.item().exp();
        let scale = ls.item().exp();
        let mut out = Vec::with_capacity(dist2.len() * cols);
        for &d in &dist2 {
            let v = objectives::rbf_kernel(d, len, scale) + objectives::SHAPE_FLOOR;
            out.extend(std::iter::repeat(v).take(cols));
        }
        let t = Tensor::matrix(dist2.len(), cols, out)?;
        self.push(
            "rbf_shape",
            t,
            Op::RbfShape {
                dist2,
                log_len,
                log_scale,
            },
        )
    }

    /// Per-row softmax cross-entropy against integer labels.
    pub fn softmax_ce_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TapeError> {
        let t = self.value(logits);
        let (rows, c) = (t.rows(), t.cols());
        if labels.len() != rows {
            return Err(TapeError::Shape {
                op: "softmax_ce_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut probs = Vec::with_capacity(t.len());
        let mut out = Vec::with_capacity(rows);
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(TapeError::Invalid {
                    op: "softmax_ce_rows",
                    detail: format!("label {y} with {c} classes"),
                });
            }
            let row = t.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + z.ln();
            out.push(lse - row[y]);
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let t = Tensor::new(vec![rows], out)?;
        self.push(
            "softmax_ce_rows",
            t,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Per-row Bernoulli negative log-likelihood of `targets` under
    /// sigmoid(`logits`), summed over the last axis.
    pub fn bce_logits_rows(&mut self, logits: Var, targets: &Tensor) -> Result<Var, TapeError> {
        let t = self.value(logits);
        if t.shape() != targets.shape() {
            return Err(shape_err("bce_logits_rows", t, targets));
        }
        let (rows, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let z = t.row(r);
            let y = targets.row(r);
            out.push(z.iter().zip(y).map(|(&z, &y)| softplus(z) - y * z).sum());
        }
        debug_assert_eq!(out.len() * c, t.len());
        let tt = Tensor::new(vec![rows], out)?;
        self.push(
            "bce_logits_rows",
            tt,
            Op::BceLogits {
                logits,
                targets: targets.data().to_vec(),
            },
        )
    }

    /// Gradients of scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TapeError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TapeError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let ga = slot!(*a);
                // dA += dC · Bᵀ
                gemm_acc(m, n, k, g, n as isize, 1, tb.data(), 1, n as isize, ga);
                let gb = slot!(*b);
                // dB += Aᵀ · dC
                gemm_acc(k, m, n, ta.data(), 1, k as isize, g, n as isize, 1, gb);
            }
            Op::Add(a, b) => {
                for (x, y) in slot!(*a).iter_mut().zip(g) {
                    *x += y;
                }
                for (x, y) in slot!(*b).iter_mut().zip(g) {
                    *x += y;
                }
            }
            Op::AddRow(a, b) => {
                for (x, y) in slot!(*a).iter_mut().zip(g) {
                    *x += y;
                }
                let gb = slot!(*b);
                let c = gb.len();
                for (j, y) in g.iter().enumerate() {
                    gb[j % c] += y;
                }
            }
            Op::Sub(a, b) => {
                for (x, y) in slot!(*a).iter_mut().zip(g) {
                    *x += y;
                }
                for (x, y) in slot!(*b).iter_mut().zip(g) {
                    *x -= y;
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                for ((x, gv), bv) in slot!(*a).iter_mut().zip(g).zip(tb) {
                    *x += gv * bv;
                }
                for ((x, gv), av) in slot!(*b).iter_mut().zip(g).zip(ta) {
                    *x += gv * av;
                }
            }
            Op::Div(a, b) => {
                let tb = self.value(*b).data();
                for ((x, gv), bv) in slot!(*a).iter_mut().zip(g).zip(tb) {
                    *x += gv / bv;
                }
                // d(a/b)/db = -(a/b)/b
                for (((x, gv), bv), q) in slot!(*b).iter_mut().zip(g).zip(tb).zip(out) {
                    *x -= gv * q / bv;
                }
            }
            Op::Affine(a, s) => {
                for (x, gv) in slot!(*a).iter_mut().zip(g) {
                    *x += s * gv;
                }
            }
            Op::Sigmoid(a) => {
                for ((x, gv), y) in slot!(*a).iter_mut().zip(g).zip(out) {
                    *x += gv * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                for ((x, gv), y) in slot!(*a).iter_mut().zip(g).zip(out) {
                    *x += gv * (1.0 - y * y);
                }
            }
            Op::Softplus(a) => {
                let ta = self.value(*a).data();
                for ((x, gv), z) in slot!(*a).iter_mut().zip(g).zip(ta) {
                    *x += gv * sigmoid(*z);
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a).data();
                for ((x, gv), z) in slot!(*a).iter_mut().zip(g).zip(ta) {
                    if *z > 0.0 {
                        *x += gv;
                    }
                }
            }
            Op::Exp(a) => {
                for ((x, gv), y) in slot!(*a).iter_mut().zip(g).zip(out) {
                    *x += gv * y;
                }
            }
            Op::Ln(a) => {
                let ta = self.value(*a).data();
                for ((x, gv), z) in slot!(*a).iter_mut().zip(g).zip(ta) {
                    *x += gv / z;
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let gp = slot!(p);
                    for r in 0..rows {
                        for j in 0..w {
                            gp[r * w + j] += g[r * total + off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::Slice { src, start } => {
                let w = node.value.cols();
                let c = self.value(*src).cols();
                let gs = slot!(*src);
                for r in 0..node.value.rows() {
                    for j in 0..w {
                        gs[r * c + start + j] += g[r * w + j];
                    }
                }
            }
            Op::Sum(a) => {
                for x in slot!(*a).iter_mut() {
                    *x += g[0];
                }
            }
            Op::Mean(a) => {
                let ga = slot!(*a);
                let s = g[0] / ga.len() as f64;
                for x in ga.iter_mut() {
                    *x += s;
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    for (x, y) in slot!(p).iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::WeightedSum(a, w) => {
                for (x, wv) in slot!(*a).iter_mut().zip(w) {
                    *x += g[0] * wv;
                }
            }
            Op::Gather { table, ids } => {
                let e = node.value.cols();
                let gt = slot!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        gt[id * e + j] += g[r * e + j];
                    }
                }
            }
            Op::SelectRows { mask, on, off } => {
                let c = node.value.cols();
                let gon = slot!(*on);
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for j in 0..c {
                            gon[r * c + j] += g[r * c + j];
                        }
                    }
                }
                let goff = slot!(*off);
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        for j in 0..c {
                            goff[r * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Gamma { shape, dudalpha } => {
                for ((x, gv), d) in slot!(*shape).iter_mut().zip(g).zip(dudalpha) {
                    *x += gv * d;
                }
            }
            Op::KlGamma { q, prior, rate } => {
                let tq = self.value(*q).data();
                let pvals: Vec<f64> = match prior {
                    PriorShape::Const(c) => vec![*c; tq.len()],
                    PriorShape::Node(p) => self.value(*p).data().to_vec(),
                };
                let gq = slot!(*q);
                for (j, x) in gq.iter_mut().enumerate() {
                    let (a, p) = (tq[j], pvals[j]);
                    *x += g[j] * ((a - p) * special::trigamma_unchecked(a) + rate - 1.0);
                }
                if let PriorShape::Node(p) = prior {
                    let gp = slot!(*p);
                    for (j, x) in gp.iter_mut().enumerate() {
                        let (a, pv) = (tq[j], pvals[j]);
                        *x += g[j]
                            * (special::digamma_unchecked(pv)
                                - special::digamma_unchecked(a)
                                - rate.ln());
                    }
                }
            }
            Op::RbfShape {
                dist2,
                log_len,
                log_scale,
            } => {
                let len = self.value(*log_len).item().exp();
                let scale = self.value(*log_scale).item().exp();
                let cols = node.value.cols();
                let mut d_len = 0.0;
                let mut d_scale = 0.0;
                for (r, &d) in dist2.iter().enumerate() {
                    let k = objectives::rbf_kernel(d, len, scale);
                    let gs: f64 = g[r * cols..(r + 1) * cols].iter().sum();
                    d_scale += gs * k;
                    d_len += gs * k * d / (len * len);
                }
                slot!(*log_len)[0] += d_len;
                slot!(*log_scale)[0] += d_scale;
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let c = self.value(*logits).cols();
                let gl = slot!(*logits);
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let ind = if j == y { 1.0 } else { 0.0 };
                        gl[r * c + j] += g[r] * (probs[r * c + j] - ind);
                    }
                }
            }
            Op::BceLogits { logits, targets } => {
                let tz = self.value(*logits);
                let c = tz.cols();
                let z = tz.data();
                let gl = slot!(*logits);
                for (j, x) in gl.iter_mut().enumerate() {
                    *x += g[j / c] * (sigmoid(z[j]) - targets[j]);
                }
            }
        }
    }
}
