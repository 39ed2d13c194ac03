use super::{RunConfig, RunError, Task};
use crate::data::synthetic::RegimeSequence;
use crate::data::{
    filter_digits, load_feature_vectors, load_jsonl_classification, load_mnist_idx,
    load_pianoroll_json, pad_frames, pad_tokens, pixel_inputs, split_train_valid, synthetic,
    DataError, FeatureTable, FrameBatch, LabeledSequence, PianoRoll, PixelSequence, TokenBatch,
    NOTES,
};
use crate::tape::Tensor;

/// One split of a task's data.
#[derive(Debug, Clone)]
pub enum Split {
    Tokens(Vec<LabeledSequence>),
    Rolls(Vec<PianoRoll>),
    Pixels(Vec<PixelSequence>),
    Regimes(Vec<RegimeSequence>),
}

/// A padded minibatch ready for the model.
#[derive(Debug, Clone)]
pub enum Batch {
    Tokens(TokenBatch),
    Rolls(FrameBatch),
    Pixels {
        inputs: Vec<Tensor>,
        labels: Vec<usize>,
    },
    Regimes {
        inputs: Vec<Tensor>,
        targets: Vec<Tensor>,
    },
}

impl Batch {
    pub fn rows(&self) -> usize {
        match self {
            Batch::Tokens(b) => b.labels.len(),
            Batch::Rolls(b) => b.lengths.len(),
            Batch::Pixels { labels, .. } => labels.len(),
            Batch::Regimes { targets, .. } => targets.first().map_or(0, Tensor::rows),
        }
    }

    /// Whether each row still has data at step `t` (after any next-step
    /// shift for piano rolls).
    pub fn live(&self, t: usize) -> Vec<bool> {
        match self {
            Batch::Tokens(b) => b.mask[t].clone(),
            Batch::Rolls(b) => b.lengths.iter().map(|&l| t + 1 < l).collect(),
            _ => vec![true; self.rows()],
        }
    }

    /// Number of timesteps after padding.
    pub fn steps(&self) -> usize {
        match self {
            Batch::Tokens(b) => b.ids.len(),
            Batch::Rolls(b) => b.frames.len().saturating_sub(1),
            Batch::Pixels { inputs, .. } | Batch::Regimes { inputs, .. } => inputs.len(),
        }
    }
}

impl Split {
    pub fn len(&self) -> usize {
        match self {
            Split::Tokens(v) => v.len(),
            Split::Rolls(v) => v.len(),
            Split::Pixels(v) => v.len(),
            Split::Regimes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn truncate(&mut self, n: usize) {
        match self {
            Split::Tokens(v) => v.truncate(n),
            Split::Rolls(v) => v.truncate(n),
            Split::Pixels(v) => v.truncate(n),
            Split::Regimes(v) => v.truncate(n),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        match self {
            Split::Tokens(v) => {
                Batch::Tokens(pad_tokens(&idx.iter().map(|&k| &v[k]).collect::<Vec<_>>()))
            }
            Split::Rolls(v) => {
                Batch::Rolls(pad_frames(&idx.iter().map(|&k| &v[k]).collect::<Vec<_>>()))
            }
            Split::Pixels(v) => {
                let items: Vec<&PixelSequence> = idx.iter().map(|&k| &v[k]).collect();
                Batch::Pixels {
                    inputs: pixel_inputs(&items),
                    labels: items.iter().map(|s| usize::from(s.label)).collect(),
                }
            }
            Split::Regimes(v) => {
                let items: Vec<&RegimeSequence> = idx.iter().map(|&k| &v[k]).collect();
                let t_max = items.iter().map(|s| s.len()).max().unwrap_or(0);
                let b = items.len();
                let inputs = (0..t_max)
                    .map(|t| {
                        Tensor::matrix(b, 2, items.iter().flat_map(|s| s.features(t)).collect())
                            .expect("shape")
                    })
                    .collect();
                let targets = (0..t_max)
                    .map(|t| {
                        Tensor::matrix(
                            b,
                            1,
                            items.iter().map(|s| f64::from(s.targets[t])).collect(),
                        )
                        .expect("shape")
                    })
                    .collect();
                Batch::Regimes { inputs, targets }
            }
        }
    }
}

/// Loaded splits plus the sizes the model needs.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Split,
    pub valid: Split,
    pub test: Option<Split>,
    /// Token vocabulary (classify only).
    pub vocab: usize,
    /// Output classes, notes for music, 1 for the synthetic task.
    pub classes: usize,
    pub features: Option<FeatureTable>,
    /// Records dropped while loading.
    pub rejected: usize,
}

impl TaskData {
    pub fn input_dim(&self, task: Task, embed_dim: usize) -> usize {
        match task {
            Task::Classify => embed_dim,
            Task::Music => NOTES,
            Task::Mnist => 1,
            Task::Synthetic => 2,
        }
    }
}

fn need<'a>(
    p: &'a Option<std::path::PathBuf>,
    what: &str,
) -> Result<&'a std::path::Path, RunError> {
    p.as_deref()
        .ok_or_else(|| RunError::Config(format!("missing data.{what}")))
}

/// Read or generate every split named by `cfg`.
pub fn load_task_data(cfg: &RunConfig) -> Result<TaskData, RunError> {
    let d = &cfg.data;
    let mut out = match cfg.task {
        Task::Classify => {
            let train = load_jsonl_classification(need(&d.train, "train")?)?;
            let (mut vocab, mut classes, mut rejected) =
                (train.vocab, train.classes, train.rejected);
            let mut extra =
                |p: &Option<std::path::PathBuf>| -> Result<Option<Vec<LabeledSequence>>, RunError> {
                    p.as_deref()
                        .map(|p| {
                            let ds = load_jsonl_classification(p)?;
                            vocab = vocab.max(ds.vocab);
                            classes = classes.max(ds.classes);
                            rejected += ds.rejected;
                            Ok(ds.items)
                        })
                        .transpose()
                };
            let valid = extra(&d.valid)?;
            let test = extra(&d.test)?;
            let (train, valid) = match valid {
                Some(v) => (train.items, v),
                None => split_train_valid(train.items),
            };
            let features = d
                .features
                .as_deref()
                .map(load_feature_vectors)
                .transpose()?;
            if let Some(f) = &features {
                if f.rows.len() < vocab {
                    return Err(RunError::Config(format!(
                        "feature table covers {} tokens, vocabulary has {vocab}",
                        f.rows.len()
                    )));
                }
            }
            TaskData {
                train: Split::Tokens(train),
                valid: Split::Tokens(valid),
                test: test.map(Split::Tokens),
                vocab,
                classes,
                features,
                rejected,
            }
        }
        Task::Music => {
            let train = load_pianoroll_json(need(&d.train, "train")?)?;
            let valid = d.valid.as_deref().map(load_pianoroll_json).transpose()?;
            let test = d.test.as_deref().map(load_pianoroll_json).transpose()?;
            let (train, valid) = match valid {
                Some(v) => (train, v),
                None => split_train_valid(train),
            };
            TaskData {
                train: Split::Rolls(train),
                valid: Split::Rolls(valid),
                test: test.map(Split::Rolls),
                vocab: 0,
                classes: NOTES,
                features: None,
                rejected: 0,
            }
        }
        Task::Mnist => {
            let load = |img: &std::path::Path,
                        lab: &std::path::Path|
             -> Result<Vec<PixelSequence>, RunError> {
                let seqs = load_mnist_idx(img, lab, cfg.mnist_variant, cfg.seeds.permutation)?;
                Ok(if cfg.digits.is_empty() {
                    seqs
                } else {
                    filter_digits(seqs, &cfg.digits)
                })
            };
            let all = load(
                need(&d.train_images, "train_images")?,
                need(&d.train_labels, "train_labels")?,
            )?;
            let (train, valid) = split_train_valid(all);
            let test = match (&d.test_images, &d.test_labels) {
                (Some(i), Some(l)) => Some(load(i, l)?),
                (None, None) => None,
                _ => {
                    return Err(RunError::Config(
                        "data.test_images and data.test_labels go together".into(),
                    ))
                }
            };
            let classes = if cfg.digits.is_empty() {
                10
            } else {
                cfg.digits.len()
            };
            TaskData {
                train: Split::Pixels(train),
                valid: Split::Pixels(valid),
                test: test.map(Split::Pixels),
                vocab: 0,
                classes,
                features: None,
                rejected: 0,
            }
        }
        Task::Synthetic => {
            let s = cfg.synthetic;
            let gen = |n: usize, k: u64| {
                Split::Regimes(synthetic::two_regime(n, s.length, s.seed.wrapping_add(k)))
            };
            TaskData {
                train: gen(s.train, 0),
                valid: gen(s.valid, 1),
                test: (s.test > 0).then(|| gen(s.test, 2)),
                vocab: 0,
                classes: 1,
                features: None,
                rejected: 0,
            }
        }
    };
    if cfg.max_items > 0 {
        out.train.truncate(cfg.max_items);
        out.valid.truncate(cfg.max_items);
        if let Some(t) = &mut out.test {
            t.truncate(cfg.max_items);
        }
    }
    if out.train.is_empty() || out.valid.is_empty() {
        return Err(RunError::Data(DataError::Invalid(format!(
            "need non-empty train and validation splits (got {} and {})",
            out.train.len(),
            out.valid.len()
        ))));
    }
    Ok(out)
}
