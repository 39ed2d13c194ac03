use std::collections::BTreeMap;

use serde::Serialize;

use super::dataset::{Batch, TaskData};
use super::{RunConfig, RunError, Task};
use crate::cells::{init_prior_params, unroll, StackConfig, UnrollArgs, Unrolled};
use crate::data::FeatureTable;
use crate::objectives::{elbo_loss_node, polyphonic_nll, PriorMode, PriorSpec};
use crate::stochastic::{NoiseSource, RngStream};
use crate::tape::{BoundParams, ParamStore, Tape, Tensor, Var};

pub const EMBED: &str = "embed";
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// One parameter whose stored shape differs from the architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeDiff {
    pub name: String,
    /// Shape the configuration expects; `None` if it expects no such tensor.
    pub expected: Option<Vec<usize>>,
    /// Shape found in the checkpoint; `None` if it is missing.
    pub found: Option<Vec<usize>>,
}

/// A recurrent stack with its task-specific input and output layers.
#[derive(Debug, Clone)]
pub struct Model {
    pub stack: StackConfig,
    pub task: Task,
    pub vocab: usize,
    pub outputs: usize,
    pub embed_dim: usize,
    pub prior: PriorSpec,
    pub features: Option<FeatureTable>,
}

/// Output of one forward pass over a batch.
#[derive(Debug)]
pub struct Forward {
    pub loss: Var,
    pub nll: Var,
    pub kl: Option<Var>,
    pub unrolled: Unrolled,
    /// Summed per-example metric (correct predictions, or frame NLL).
    pub metric_sum: f64,
    /// Examples behind `metric_sum`.
    pub metric_count: usize,
}

impl Model {
    pub fn new(cfg: &RunConfig, data: &TaskData) -> Result<Model, RunError> {
        let stack = StackConfig {
            variant: cfg.variant,
            input_dim: data.input_dim(cfg.task, cfg.embed_dim),
            hidden: cfg.hidden,
            layers: cfg.layers,
            gate_depth: cfg.gate_depth,
            tau: cfg.tau,
            forget_bias: cfg.forget_bias,
            input_bias: cfg.input_bias,
        };
        stack.validate()?;
        Ok(Model {
            stack,
            task: cfg.task,
            vocab: data.vocab,
            outputs: data.classes,
            embed_dim: cfg.embed_dim,
            prior: cfg.prior.clone(),
            features: if cfg.prior.mode == PriorMode::FeatureKernel {
                data.features.clone()
            } else {
                None
            },
        })
    }

    /// Fresh parameters; every tensor is drawn from its own child stream.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore, RunError> {
        let root = RngStream::new(seed, 0x1417);
        let mut store = ParamStore::new();
        self.stack.init_params(&mut store, &mut root.split(0))?;
        if self.stack.variant.has_prior() {
            init_prior_params(&mut store, &self.prior);
        }
        let h = self.stack.hidden;
        let mut rng = root.split(1);
        let bound = 1.0 / (h as f64).sqrt();
        let w = (0..h * self.outputs)
            .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
            .collect();
        store.insert(HEAD_W, Tensor::new(vec![h, self.outputs], w)?);
        store.insert(HEAD_B, Tensor::zeros(&[self.outputs]));
        if self.task == Task::Classify {
            let mut rng = root.split(2);
            let e = (0..self.vocab * self.embed_dim)
                .map(|_| 0.1 * rng.normal())
                .collect();
            store.insert(EMBED, Tensor::new(vec![self.vocab, self.embed_dim], e)?);
        }
        Ok(store)
    }

    /// Compare a loaded parameter set against this architecture.
    pub fn check_params(&self, store: &ParamStore) -> Result<(), RunError> {
        let want: BTreeMap<String, Vec<usize>> = self
            .init_params(0)?
            .iter()
            .map(|(k, t)| (k.clone(), t.shape().to_vec()))
            .collect();
        let have: BTreeMap<String, Vec<usize>> = store
            .iter()
            .map(|(k, t)| (k.clone(), t.shape().to_vec()))
            .collect();
        let mut diffs = Vec::new();
        for name in want
            .keys()
            .chain(have.keys().filter(|k| !want.contains_key(*k)))
        {
            let (e, f) = (want.get(name), have.get(name));
            if e != f {
                diffs.push(ShapeDiff {
                    name: name.clone(),
                    expected: e.cloned(),
                    found: f.cloned(),
                });
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(RunError::Architecture(diffs))
        }
    }

    /// Squared feature distance between consecutive tokens, `[t][row]`.
    fn distances(&self, ids: &[Vec<usize>]) -> Option<Vec<Vec<f64>>> {
        let f = self.features.as_ref()?;
        Some(
            ids.iter()
                .enumerate()
                .map(|(t, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(r, &tok)| {
                            if t == 0 {
                                return 0.0;
                            }
                            let (a, b) = (f.get(tok), f.get(ids[t - 1][r]));
                            match (a, b) {
                                (Some(a), Some(b)) => {
                                    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
                                }
                                _ => 0.0,
                            }
                        })
                        .collect()
                })
                .collect(),
        )
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        batch: &Batch,
        noise: &mut NoiseSource,
    ) -> Result<Forward, RunError> {
        let prior = self.stack.variant.has_prior().then_some(&self.prior);
        let (head_w, head_b) = (params.var(HEAD_W)?, params.var(HEAD_B)?);
        let logits = |tape: &mut Tape, h: Var| -> Result<Var, RunError> {
            let z = tape.matmul(h, head_w)?;
            Ok(tape.add(z, head_b)?)
        };
        let (unrolled, nll, metric_sum, metric_count) = match batch {
            Batch::Tokens(b) => {
                let embed = params.var(EMBED)?;
                let inputs = b
                    .ids
                    .iter()
                    .map(|ids| tape.gather_rows(embed, ids))
                    .collect::<Result<Vec<_>, _>>()?;
                let dist2 = self.distances(&b.ids);
                let args = UnrollArgs {
                    lengths: Some(&b.lengths),
                    prior,
                    dist2: dist2.as_deref(),
                };
                let un = unroll(&self.stack, tape, params, &inputs, noise, args)?;
                let z = logits(tape, *un.outputs.last().expect("non-empty"))?;
                let correct = count_correct(tape.value(z), &b.labels);
                let ce = tape.softmax_ce_rows(z, &b.labels)?;
                let nll = tape.mean(ce)?;
                (un, nll, correct as f64, b.labels.len())
            }
            Batch::Pixels { inputs, labels } => {
                let xs = inputs
                    .iter()
                    .map(|x| tape.leaf(x.clone()))
                    .collect::<Result<Vec<_>, _>>()?;
                let un = unroll(
                    &self.stack,
                    tape,
                    params,
                    &xs,
                    noise,
                    UnrollArgs {
                        prior,
                        ..Default::default()
                    },
                )?;
                let z = logits(tape, *un.outputs.last().expect("non-empty"))?;
                let correct = count_correct(tape.value(z), labels);
                let ce = tape.softmax_ce_rows(z, labels)?;
                let nll = tape.mean(ce)?;
                (un, nll, correct as f64, labels.len())
            }
            Batch::Rolls(b) => {
                let (inputs, targets, lengths) = b.next_step();
                let xs = inputs
                    .into_iter()
                    .map(|x| tape.leaf(x))
                    .collect::<Result<Vec<_>, _>>()?;
                let args = UnrollArgs {
                    lengths: Some(&lengths),
                    prior,
                    ..Default::default()
                };
                let un = unroll(&self.stack, tape, params, &xs, noise, args)?;
                // Target t follows input t, so it is read off hidden[t]; the
                // objective reads target t from its `t-1` slot, hence the shift.
                let mut shifted = un.outputs[1..].to_vec();
                shifted.push(*un.outputs.last().expect("non-empty"));
                let nll = polyphonic_nll(
                    tape,
                    un.outputs[0],
                    &shifted,
                    head_w,
                    head_b,
                    &targets,
                    &lengths,
                )?;
                let per_seq = tape.value(nll).item();
                (un, nll, per_seq * lengths.len() as f64, lengths.len())
            }
            Batch::Regimes { inputs, targets } => {
                let xs = inputs
                    .iter()
                    .map(|x| tape.leaf(x.clone()))
                    .collect::<Result<Vec<_>, _>>()?;
                let un = unroll(
                    &self.stack,
                    tape,
                    params,
                    &xs,
                    noise,
                    UnrollArgs {
                        prior,
                        ..Default::default()
                    },
                )?;
                let rows = batch.rows();
                let w = 1.0 / (rows * targets.len()) as f64;
                let mut terms = Vec::with_capacity(targets.len());
                let mut correct = 0;
                for (t, y) in targets.iter().enumerate() {
                    let z = logits(tape, un.outputs[t])?;
                    correct += tape
                        .value(z)
                        .data()
                        .iter()
                        .zip(y.data())
                        .filter(|(z, y)| (**z > 0.0) == (**y > 0.5))
                        .count();
                    let bce = tape.bce_logits_rows(z, y)?;
                    terms.push(tape.weighted_sum(bce, vec![w; rows])?);
                }
                let nll = tape.add_n(&terms)?;
                (un, nll, correct as f64, rows * targets.len())
            }
        };
        let kl = unrolled.kl_sum;
        let loss = elbo_loss_node(tape, nll, kl, self.prior.lambda)?;
        Ok(Forward {
            loss,
            nll,
            kl,
            unrolled,
            metric_sum,
            metric_count,
        })
    }
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = logits.row(r);
            // first maximum wins ties
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (k, &v)| if v > row[b] { k } else { b });
            best == y
        })
        .count()
}
