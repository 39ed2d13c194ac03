//! Training and evaluation runs driven by a [`RunConfig`].
//!
//! A run directory holds:
//!
//! - `run.json`: the full configuration, re-loadable with `--config`;
//! - `metrics.jsonl`: one record per epoch (no timing, so repeated runs
//!   compare byte for byte);
//! - `timing.jsonl`: wall-clock seconds per epoch;
//! - `best.ckpt` (best validation metric so far) and `last.ckpt`;
//! - `failure.json` when a run aborts on a non-finite value.

mod config;
mod dataset;
mod model;

pub use config::{DataPaths, EvalMode, RunConfig, Seeds, SyntheticSpec, Task, CODE_VERSION};
pub use dataset::{load_task_data, Batch, Split, TaskData};
pub use model::{Forward, Model, ShapeDiff, EMBED, HEAD_B, HEAD_W};

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::cells::CellError;
use crate::data::{batch_indices, DataError};
use crate::objectives::{clip_global_norm, AdamState, ObjectiveError};
use crate::stochastic::{NoiseSource, RngStream};
use crate::tape::{CheckpointError, ParamStore, Tape, TapeError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error("checkpoint does not match the configured architecture: {}", describe_diffs(.0))]
    Architecture(Vec<ShapeDiff>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
}

fn describe_diffs(diffs: &[ShapeDiff]) -> String {
    let show = |s: &Option<Vec<usize>>| {
        s.as_ref()
            .map_or("absent".to_string(), |v| format!("{v:?}"))
    };
    diffs
        .iter()
        .map(|d| {
            format!(
                "{} (expected {}, found {})",
                d.name,
                show(&d.expected),
                show(&d.found)
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

impl RunError {
    /// Process exit status: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Architecture(_) => 1,
            RunError::Data(_) | RunError::Checkpoint { .. } | RunError::Io { .. } => 2,
            RunError::Numeric(_) => 3,
        }
    }
}

impl From<TapeError> for RunError {
    fn from(e: TapeError) -> Self {
        RunError::Numeric(e.to_string())
    }
}

impl From<CellError> for RunError {
    fn from(e: CellError) -> Self {
        match e {
            CellError::Tape(t) => t.into(),
            other => RunError::Config(other.to_string()),
        }
    }
}

impl From<ObjectiveError> for RunError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::Label { .. } | ObjectiveError::NonBinary(_) => {
                RunError::Data(DataError::Invalid(e.to_string()))
            }
            ObjectiveError::Tape(t) => t.into(),
            other => RunError::Numeric(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean minibatch objective (likelihood term plus weighted KL).
    pub train_loss: f64,
    /// Mean minibatch KL sum; 0 for variants without a prior.
    pub kl: f64,
    pub valid_metric: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: String,
    pub task: String,
    pub metric: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_valid: Option<f64>,
    pub history: Vec<EpochMetrics>,
    pub out_dir: PathBuf,
}

/// Which split an evaluation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: EvalSplit,
    pub mode: EvalMode,
    pub metric: String,
    /// One value per pass (a single value in mean mode).
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub examples: usize,
}

fn noise_for(mode: EvalMode, seed: u64, pass: u64, batch: u64) -> NoiseSource {
    match mode {
        EvalMode::Mean => NoiseSource::Mean,
        EvalMode::Sample => {
            NoiseSource::Sample(RngStream::new(seed, 0xe7a1).split(pass).split(batch))
        }
    }
}

/// Metric of `params` over a whole split, one pass.
pub fn split_metric(
    model: &Model,
    params: &ParamStore,
    split: &Split,
    batch_size: usize,
    mode: EvalMode,
    seed: u64,
    pass: u64,
) -> Result<f64, RunError> {
    let (mut sum, mut count) = (0.0, 0);
    for (k, idx) in batch_indices(split.len(), batch_size, false, 0, 0)
        .iter()
        .enumerate()
    {
        let batch = split.batch(idx);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let mut noise = noise_for(mode, seed, pass, k as u64);
        let f = model.forward(&mut tape, &bound, &batch, &mut noise)?;
        sum += f.metric_sum;
        count += f.metric_count;
    }
    Ok(sum / count.max(1) as f64)
}

fn write_checkpoint(
    path: &Path,
    params: &ParamStore,
    cfg: &RunConfig,
    epoch: usize,
    valid: Option<f64>,
) -> Result<(), RunError> {
    let meta = json!({
        "variant": cfg.variant.id(),
        "task": cfg.task.id(),
        "epoch": epoch,
        "valid_metric": valid,
        "code_version": CODE_VERSION,
    });
    let tmp = path.with_extension("tmp");
    let f = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(f);
    params
        .write_checkpoint(&mut w, &meta)
        .map_err(io_err(&tmp))?;
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value), RunError> {
    let f = File::open(path).map_err(io_err(path))?;
    ParamStore::read_checkpoint(BufReader::new(f)).map_err(|source| RunError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

fn better(task: Task, new: f64, old: Option<f64>) -> bool {
    match old {
        None => true,
        Some(o) if task.higher_is_better() => new > o,
        Some(o) => new < o,
    }
}

fn append_line(path: &Path, line: &str) -> Result<(), RunError> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(f, "{line}").map_err(io_err(path))
}

/// Train per `cfg`, writing the run directory `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary, RunError> {
    cfg.validate()?;
    let data = load_task_data(cfg)?;
    train_on(cfg, &data)
}

/// Train on already-loaded data.
pub fn train_on(cfg: &RunConfig, data: &TaskData) -> Result<TrainSummary, RunError> {
    cfg.validate()?;
    let model = Model::new(cfg, data)?;
    let mut params = model.init_params(cfg.seeds.init)?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;

    let mut record = cfg.clone();
    record.code_version = CODE_VERSION.to_string();
    let run_path = out.join("run.json");
    fs::write(&run_path, record.to_json()).map_err(io_err(&run_path))?;
    let metrics_path = out.join("metrics.jsonl");
    let timing_path = out.join("timing.jsonl");
    for p in [&metrics_path, &timing_path] {
        fs::write(p, "").map_err(io_err(p))?;
    }
    let best_path = out.join("best.ckpt");
    write_checkpoint(&best_path, &params, cfg, 0, None)?;

    let mut adam = AdamState::new();
    let mut best: Option<f64> = None;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let sampler = RngStream::new(cfg.seeds.sampler, 0x7a1);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let batches = batch_indices(
            data.train.len(),
            cfg.batch_size,
            true,
            cfg.seeds.shuffle,
            epoch as u64,
        );
        let (mut loss_sum, mut kl_sum) = (0.0, 0.0);
        for (k, idx) in batches.iter().enumerate() {
            let batch = data.train.batch(idx);
            let mut noise = NoiseSource::Sample(sampler.split(epoch as u64).split(k as u64));
            let step = (|| -> Result<(f64, f64), RunError> {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape)?;
                let f = model.forward(&mut tape, &bound, &batch, &mut noise)?;
                let loss = tape.value(f.loss).item();
                let kl = f.kl.map_or(0.0, |v| tape.value(v).item());
                if !loss.is_finite() {
                    return Err(RunError::Numeric(format!("loss is {loss}")));
                }
                let grads = tape.backward(f.loss)?;
                let mut g = bound.collect(&tape, &grads);
                let norm = clip_global_norm(&mut g, cfg.clip_norm);
                if !norm.is_finite() {
                    return Err(RunError::Numeric(format!("gradient norm is {norm}")));
                }
                adam.step(&mut params, &g, &cfg.adam)?;
                Ok((loss, kl))
            })();
            match step {
                Ok((l, kl)) => {
                    loss_sum += l;
                    kl_sum += kl;
                }
                Err(RunError::Numeric(detail)) => {
                    let fail = json!({ "epoch": epoch, "batch": k, "detail": detail, "kept_checkpoint": best_path });
                    let path = out.join("failure.json");
                    fs::write(&path, serde_json::to_string_pretty(&fail).expect("json"))
                        .map_err(io_err(&path))?;
                    return Err(RunError::Numeric(format!(
                        "epoch {epoch}, batch {k}: {detail}; last good checkpoint kept at {}",
                        best_path.display()
                    )));
                }
                Err(e) => return Err(e),
            }
        }
        let n = batches.len().max(1) as f64;
        let valid = split_metric(
            &model,
            &params,
            &data.valid,
            cfg.batch_size,
            cfg.eval_mode,
            cfg.seeds.sampler,
            0,
        )?;
        let train_metric = if cfg.train_metric {
            Some(split_metric(
                &model,
                &params,
                &data.train,
                cfg.batch_size,
                cfg.eval_mode,
                cfg.seeds.sampler,
                0,
            )?)
        } else {
            None
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            kl: kl_sum / n,
            valid_metric: valid,
            train_metric,
        };
        append_line(&metrics_path, &serde_json::to_string(&m).expect("json"))?;
        append_line(
            &timing_path,
            &json!({ "epoch": epoch, "seconds": started.elapsed().as_secs_f64() }).to_string(),
        )?;
        if !valid.is_finite() {
            return Err(RunError::Numeric(format!(
                "validation metric is {valid} after epoch {epoch}"
            )));
        }
        if better(cfg.task, valid, best) {
            best = Some(valid);
            best_epoch = epoch;
            write_checkpoint(&best_path, &params, cfg, epoch, best)?;
        }
        write_checkpoint(&out.join("last.ckpt"), &params, cfg, epoch, Some(valid))?;
        history.push(m);
    }
    Ok(TrainSummary {
        variant: cfg.variant.id().to_string(),
        task: cfg.task.id().to_string(),
        metric: cfg.task.metric_name().to_string(),
        epochs: cfg.epochs,
        best_epoch,
        best_valid: best,
        history,
        out_dir: out,
    })
}

/// Load a checkpoint and check it against the configured architecture.
pub fn load_model(
    cfg: &RunConfig,
    data: &TaskData,
    ckpt: &Path,
) -> Result<(Model, ParamStore), RunError> {
    let model = Model::new(cfg, data)?;
    let (params, _) = read_checkpoint(ckpt)?;
    model.check_params(&params)?;
    Ok((model, params))
}

/// Evaluate a checkpoint on one split in the configured mode.
pub fn evaluate(
    cfg: &RunConfig,
    ckpt: &Path,
    split: Option<EvalSplit>,
) -> Result<EvalReport, RunError> {
    cfg.validate()?;
    let data = load_task_data(cfg)?;
    let (model, params) = load_model(cfg, &data, ckpt)?;
    evaluate_params(cfg, &data, &model, &params, split)
}

pub fn evaluate_params(
    cfg: &RunConfig,
    data: &TaskData,
    model: &Model,
    params: &ParamStore,
    split: Option<EvalSplit>,
) -> Result<EvalReport, RunError> {
    let which = split.unwrap_or(if data.test.is_some() {
        EvalSplit::Test
    } else {
        EvalSplit::Valid
    });
    let s = match which {
        EvalSplit::Train => &data.train,
        EvalSplit::Valid => &data.valid,
        EvalSplit::Test => data
            .test
            .as_ref()
            .ok_or_else(|| RunError::Config("no test split configured".into()))?,
    };
    let passes = match cfg.eval_mode {
        EvalMode::Mean => 1,
        EvalMode::Sample => cfg.eval_samples,
    };
    let values = (0..passes)
        .map(|k| {
            split_metric(
                model,
                params,
                s,
                cfg.batch_size,
                cfg.eval_mode,
                cfg.seeds.sampler,
                k as u64,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        split: which,
        mode: cfg.eval_mode,
        metric: cfg.task.metric_name().to_string(),
        values,
        mean,
        std,
        examples: s.len(),
    })
}

/// KL weights tried by [`lambda_sweep`].
pub const LAMBDA_GRID: [f64; 4] = [0.001, 0.01, 0.1, 1.0];

/// Train once per λ, each run in `out_dir/lambda-<λ>`.
pub fn lambda_sweep(
    cfg: &RunConfig,
    lambdas: &[f64],
) -> Result<Vec<(f64, TrainSummary)>, RunError> {
    cfg.validate()?;
    let data = load_task_data(cfg)?;
    lambdas
        .iter()
        .map(|&lambda| {
            let mut c = cfg.clone();
            c.prior.lambda = lambda;
            c.out_dir = cfg.out_dir.join(format!("lambda-{lambda}"));
            train_on(&c, &data).map(|s| (lambda, s))
        })
        .collect()
}
