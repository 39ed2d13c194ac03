use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::cells::Variant;
use crate::data::{MnistVariant, DEFAULT_PERMUTATION_SEED};
use crate::objectives::{AdamConfig, PriorMode, PriorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Token sequences to one label (JSONL).
    Classify,
    /// Next-frame prediction on piano rolls.
    Music,
    /// Pixel-by-pixel digit classification.
    Mnist,
    /// Generated two-regime memory task with a per-step binary target.
    Synthetic,
}

impl Task {
    pub fn id(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Music => "music",
            Task::Mnist => "mnist",
            Task::Synthetic => "synthetic",
        }
    }

    /// Accuracy for classification tasks, frame NLL for music.
    pub fn higher_is_better(self) -> bool {
        self != Task::Music
    }

    pub fn metric_name(self) -> &'static str {
        if self == Task::Music {
            "frame_nll"
        } else {
            "accuracy"
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Task {
    type Err = RunError;
    fn from_str(s: &str) -> Result<Self, RunError> {
        [Task::Classify, Task::Music, Task::Mnist, Task::Synthetic]
            .into_iter()
            .find(|t| t.id() == s)
            .ok_or_else(|| {
                RunError::Config(format!(
                    "unknown task {s:?} (expected classify, music, mnist or synthetic)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Gates at their analytic means; deterministic.
    #[default]
    Mean,
    /// Average of several stochastic passes.
    Sample,
}

impl FromStr for EvalMode {
    type Err = RunError;
    fn from_str(s: &str) -> Result<Self, RunError> {
        match s {
            "mean" => Ok(EvalMode::Mean),
            "sample" => Ok(EvalMode::Sample),
            _ => Err(RunError::Config(format!(
                "unknown eval mode {s:?} (expected mean or sample)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub sampler: u64,
    pub permutation: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 1,
            shuffle: 2,
            sampler: 3,
            permutation: DEFAULT_PERMUTATION_SEED,
        }
    }
}

impl Seeds {
    /// Derive every seed except the permutation from one number.
    pub fn from_base(base: u64) -> Self {
        Seeds {
            init: base,
            shuffle: base.wrapping_add(1),
            sampler: base.wrapping_add(2),
            permutation: DEFAULT_PERMUTATION_SEED,
        }
    }
}

/// Dataset files. Which ones are needed depends on the task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DataPaths {
    /// JSONL (classify) or piano-roll JSON (music) training file.
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// IDX training images and labels (mnist).
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Per-token feature vectors for the feature-kernel prior.
    pub features: Option<PathBuf>,
}

impl DataPaths {
    /// Resolve relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.train,
            &mut self.valid,
            &mut self.test,
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.test_images,
            &mut self.test_labels,
            &mut self.features,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Size of the generated two-regime task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub length: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train: 256,
            valid: 64,
            test: 64,
            length: 20,
            seed: 7,
        }
    }
}

/// Everything a training or evaluation run needs.
///
/// Loaded from one JSON document; command-line flags override fields of
/// the file, and unset fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub task: Task,
    pub data: DataPaths,
    pub synthetic: SyntheticSpec,
    pub hidden: usize,
    pub layers: usize,
    /// Token embedding width (classify).
    pub embed_dim: usize,
    pub gate_depth: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub tau: f64,
    /// Initial forget-gate log-odds at zero input.
    pub forget_bias: f64,
    /// Initial input-gate log-odds at zero input.
    pub input_bias: f64,
    pub prior: PriorSpec,
    pub seeds: Seeds,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub eval_mode: EvalMode,
    /// Stochastic passes in sample mode.
    pub eval_samples: usize,
    /// Cap on sequences per split; 0 means no cap.
    pub max_items: usize,
    pub mnist_variant: MnistVariant,
    /// Digits kept for mnist, relabelled by position; empty keeps all ten.
    pub digits: Vec<u8>,
    /// Also report the training-set metric after every epoch.
    pub train_metric: bool,
    pub out_dir: PathBuf,
    /// Filled in when the run record is written.
    pub code_version: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Bblstm5g,
            task: Task::Synthetic,
            data: DataPaths::default(),
            synthetic: SyntheticSpec::default(),
            hidden: 32,
            layers: 1,
            embed_dim: 64,
            gate_depth: 1,
            batch_size: 32,
            epochs: 10,
            adam: AdamConfig::default(),
            tau: 0.5,
            forget_bias: 1.0,
            input_bias: 0.0,
            prior: PriorSpec::default(),
            seeds: Seeds::default(),
            clip_norm: 5.0,
            eval_mode: EvalMode::Mean,
            eval_samples: 10,
            max_items: 0,
            mnist_variant: MnistVariant::Sequential,
            digits: Vec::new(),
            train_metric: false,
            out_dir: PathBuf::from("runs/latest"),
            code_version: String::new(),
        }
    }
}

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Config(format!("bad config: {e}")))
    }

    /// Read a config file; relative data paths resolve against its folder.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.data.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |msg: String| Err(RunError::Config(msg));
        for (name, v) in [
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("embed_dim", self.embed_dim),
            ("gate_depth", self.gate_depth),
            ("batch_size", self.batch_size),
            ("eval_samples", self.eval_samples),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.adam.lr > 0.0) || !self.adam.lr.is_finite() {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.adam.lr
            ));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.clip_norm >= 0.0) {
            return bad(format!(
                "clip_norm must be non-negative, got {}",
                self.clip_norm
            ));
        }
        self.prior
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        if self.prior.mode == PriorMode::FeatureKernel {
            if !self.variant.has_prior() {
                return bad(format!(
                    "the feature-kernel prior needs variant bblstm5gp, not {}",
                    self.variant
                ));
            }
            if self.task != Task::Classify {
                return bad(format!(
                    "the feature-kernel prior needs token inputs (task classify), not {}",
                    self.task
                ));
            }
            if self.data.features.is_none() {
                return bad("the feature-kernel prior needs data.features".into());
            }
        }
        match self.task {
            Task::Classify | Task::Music => {
                if self.data.train.is_none() {
                    return bad(format!("task {} needs data.train", self.task));
                }
            }
            Task::Mnist => {
                if self.data.train_images.is_none() || self.data.train_labels.is_none() {
                    return bad("task mnist needs data.train_images and data.train_labels".into());
                }
                if self.digits.iter().any(|&d| d > 9) {
                    return bad(format!("digits must be 0-9, got {:?}", self.digits));
                }
            }
            Task::Synthetic => {
                let s = &self.synthetic;
                if s.train == 0 || s.valid == 0 || s.length == 0 {
                    return bad("synthetic train, valid and length must be positive".into());
                }
            }
        }
        Ok(())
    }
}
