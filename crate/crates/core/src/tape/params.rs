use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use super::{Gradients, Tape, TapeError, Tensor, Var};

/// First line of every checkpoint file.
pub const CHECKPOINT_MAGIC: &str = "betagate-checkpoint 1";

/// Named parameter tensors, iterated in name order.
///
/// # Checkpoint format
///
/// A UTF-8 text file:
///
/// ```text
/// betagate-checkpoint 1
/// meta <one line of JSON>
/// tensor <name> <rank> <dim_1> ... <dim_rank>
/// <row-major values separated by spaces>
/// ...
/// ```
///
/// Values are written with Rust's shortest round-trip float formatting, so
/// reading a checkpoint back reproduces every bit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Put every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams, TapeError> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), tape.leaf(t.clone())?);
        }
        Ok(BoundParams { vars })
    }

    pub fn write_checkpoint<W: Write>(
        &self,
        mut w: W,
        meta: &serde_json::Value,
    ) -> std::io::Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "meta {}", serde_json::to_string(meta)?)?;
        let mut line = String::new();
        for (name, t) in &self.tensors {
            line.clear();
            write!(line, "tensor {name} {}", t.shape().len()).expect("string write");
            for d in t.shape() {
                write!(line, " {d}").expect("string write");
            }
            writeln!(w, "{line}")?;
            line.clear();
            for (i, v) in t.data().iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{v:?}").expect("string write");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(
        r: R,
    ) -> Result<(ParamStore, serde_json::Value), CheckpointError> {
        let mut lines = BufReader::new(r).lines();
        let mut next = |what: &'static str| -> Result<String, CheckpointError> {
            lines
                .next()
                .transpose()?
                .ok_or(CheckpointError::Truncated(what))
        };
        let magic = next("header")?;
        if magic.trim_end() != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadHeader(magic));
        }
        let meta_line = next("meta line")?;
        let meta_json = meta_line
            .strip_prefix("meta ")
            .ok_or_else(|| CheckpointError::Malformed(meta_line.clone()))?;
        let meta: serde_json::Value = serde_json::from_str(meta_json)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let mut store = ParamStore::new();
        loop {
            let header = match next("tensor header") {
                Ok(h) => h,
                Err(CheckpointError::Truncated(_)) => break,
                Err(e) => return Err(e),
            };
            if header.trim().is_empty() {
                continue;
            }
            let mut parts = header.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(CheckpointError::Malformed(header));
            }
            let name = parts
                .next()
                .ok_or_else(|| CheckpointError::Malformed(header.clone()))?
                .to_string();
            let parse_usize = |s: Option<&str>| s.and_then(|s| s.parse::<usize>().ok());
            let rank = parse_usize(parts.next())
                .ok_or_else(|| CheckpointError::Malformed(header.clone()))?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    parse_usize(parts.next())
                        .ok_or_else(|| CheckpointError::Malformed(header.clone()))?,
                );
            }
            let values_line = next("tensor values")?;
            let data = values_line
                .split_whitespace()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| CheckpointError::Malformed(format!("value {s:?} in {name}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let t = Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            store.insert(name, t);
        }
        Ok((store, meta))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (first line {0:?})")]
    BadHeader(String),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Tape handles of a [`ParamStore`] bound for one step.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var, TapeError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TapeError::Invalid {
                op: "param",
                detail: format!("unknown parameter {name}"),
            })
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradient per parameter name; unused parameters get zeros.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v, tape.value(v).len())))
            .collect()
    }
}
