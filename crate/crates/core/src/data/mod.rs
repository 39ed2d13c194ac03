//! Dataset formats, synthetic generators and batching.

mod features;
mod mnist;
mod music;
pub mod synthetic;
mod text;

pub use features::{load_feature_vectors, write_feature_vectors, FeatureTable};
pub use mnist::{
    filter_digits, load_idx_images, load_idx_labels, load_mnist_idx, permutation,
    split_train_valid, write_idx_images, write_idx_labels, MnistVariant, PixelSequence,
    DEFAULT_PERMUTATION_SEED, IMAGE_PIXELS,
};
pub use music::{load_pianoroll_json, write_pianoroll_json, PianoRoll, NOTES};
pub use text::{
    load_jsonl_classification, write_jsonl_classification, ClassificationDataset, LabeledSequence,
};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::stochastic::RngStream;
use crate::tape::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("sequence {seq}, step {step}: note {note} outside [0, 88)")]
    NoteRange { seq: usize, step: usize, note: i64 },
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Index batches for one epoch: a seeded shuffle of `0..n` (or the
/// identity when `shuffle` is false) cut into chunks of `batch_size`.
/// The order depends only on `(seed, epoch)`.
pub fn batch_indices(
    n: usize,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        RngStream::new(seed, 0x0da7a).split(epoch).shuffle(&mut idx);
    }
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Token sequences padded to the longest one.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// `ids[t][row]`; padding positions hold 0.
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    /// `mask[t][row]`.
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
}

pub fn pad_tokens(items: &[&LabeledSequence]) -> TokenBatch {
    let lengths: Vec<usize> = items.iter().map(|s| s.tokens.len()).collect();
    let t_max = lengths.iter().copied().max().unwrap_or(0);
    let ids = (0..t_max)
        .map(|t| {
            items
                .iter()
                .map(|s| s.tokens.get(t).copied().unwrap_or(0))
                .collect()
        })
        .collect();
    let mask = (0..t_max)
        .map(|t| lengths.iter().map(|&l| t < l).collect())
        .collect();
    TokenBatch {
        ids,
        lengths,
        mask,
        labels: items.iter().map(|s| s.label).collect(),
    }
}

/// Piano rolls as dense frames padded to the longest sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    /// `frames[t]` is `batch × 88`; padding frames are silent.
    pub frames: Vec<Tensor>,
    pub lengths: Vec<usize>,
}

impl FrameBatch {
    /// Inputs are frames `0..T-1`, targets frames `1..T`, and each row's
    /// valid length shrinks by one.
    pub fn next_step(&self) -> (Vec<Tensor>, Vec<Tensor>, Vec<usize>) {
        let n = self.frames.len();
        let inputs = self.frames[..n - 1].to_vec();
        let targets = self.frames[1..].to_vec();
        let lengths = self.lengths.iter().map(|&l| l - 1).collect();
        (inputs, targets, lengths)
    }
}

pub fn pad_frames(items: &[&PianoRoll]) -> FrameBatch {
    let lengths: Vec<usize> = items.iter().map(|r| r.steps.len()).collect();
    let t_max = lengths.iter().copied().max().unwrap_or(0);
    let b = items.len();
    let frames = (0..t_max)
        .map(|t| {
            let mut d = vec![0.0; b * NOTES];
            for (row, roll) in items.iter().enumerate() {
                if let Some(step) = roll.steps.get(t) {
                    for &n in step {
                        d[row * NOTES + n as usize] = 1.0;
                    }
                }
            }
            Tensor::matrix(b, NOTES, d).expect("frame shape")
        })
        .collect();
    FrameBatch { frames, lengths }
}

/// Pixel sequences as `784` tensors of `batch × 1`.
pub fn pixel_inputs(items: &[&PixelSequence]) -> Vec<Tensor> {
    (0..IMAGE_PIXELS)
        .map(|t| {
            Tensor::matrix(items.len(), 1, items.iter().map(|s| s.pixels[t]).collect())
                .expect("pixel shape")
        })
        .collect()
}
