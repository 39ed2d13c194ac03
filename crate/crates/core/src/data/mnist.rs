use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, DataError};
use crate::stochastic::RngStream;

pub const IMAGE_PIXELS: usize = 784;
pub const DEFAULT_PERMUTATION_SEED: u64 = 92916;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MnistVariant {
    /// Pixels in row-major order.
    #[default]
    Sequential,
    /// Pixels in one fixed random order shared by all images.
    Permuted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelSequence {
    /// Grayscale values in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub label: u8,
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn format_err(path: &Path, msg: String) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        msg,
    }
}

/// Raw images as `(rows, cols, pixels)`.
pub fn load_idx_images(path: &Path) -> Result<(usize, usize, Vec<Vec<u8>>), DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 16 {
        return Err(format_err(
            path,
            format!("{} bytes is too short for an IDX image header", bytes.len()),
        ));
    }
    let magic = be_u32(&bytes, 0);
    if magic != IMAGES_MAGIC {
        return Err(format_err(path, format!("bad image magic {magic:#010x}")));
    }
    let (n, rows, cols) = (
        be_u32(&bytes, 4) as usize,
        be_u32(&bytes, 8) as usize,
        be_u32(&bytes, 12) as usize,
    );
    let size = rows * cols;
    if bytes.len() != 16 + n * size {
        return Err(format_err(
            path,
            format!(
                "expected {} bytes for {n} images of {rows}x{cols}, found {}",
                16 + n * size,
                bytes.len()
            ),
        ));
    }
    Ok((
        rows,
        cols,
        bytes[16..]
            .chunks(size.max(1))
            .take(n)
            .map(<[u8]>::to_vec)
            .collect(),
    ))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 8 {
        return Err(format_err(
            path,
            format!("{} bytes is too short for an IDX label header", bytes.len()),
        ));
    }
    let magic = be_u32(&bytes, 0);
    if magic != LABELS_MAGIC {
        return Err(format_err(path, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(&bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(format_err(
            path,
            format!(
                "expected {} bytes for {n} labels, found {}",
                8 + n,
                bytes.len()
            ),
        ));
    }
    Ok(bytes[8..].to_vec())
}

pub fn write_idx_images(
    path: &Path,
    rows: usize,
    cols: usize,
    images: &[Vec<u8>],
) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        if img.len() != rows * cols {
            return Err(DataError::Invalid(format!(
                "image of {} pixels, expected {}",
                img.len(),
                rows * cols
            )));
        }
        out.extend_from_slice(img);
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(8 + labels.len());
    for v in [LABELS_MAGIC, labels.len() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(io_err(path))
}

/// The fixed pixel order of the permuted task.
pub fn permutation(seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..IMAGE_PIXELS).collect();
    RngStream::new(seed, 0x9e_4d15).shuffle(&mut p);
    p
}

/// Load 28×28 images with their labels as pixel sequences.
pub fn load_mnist_idx(
    images: &Path,
    labels: &Path,
    variant: MnistVariant,
    seed: u64,
) -> Result<Vec<PixelSequence>, DataError> {
    let (rows, cols, imgs) = load_idx_images(images)?;
    if rows * cols != IMAGE_PIXELS {
        return Err(format_err(
            images,
            format!("images are {rows}x{cols}, expected 28x28"),
        ));
    }
    let lab = load_idx_labels(labels)?;
    if lab.len() != imgs.len() {
        return Err(format_err(
            labels,
            format!("{} labels for {} images", lab.len(), imgs.len()),
        ));
    }
    let perm = match variant {
        MnistVariant::Sequential => None,
        MnistVariant::Permuted => Some(permutation(seed)),
    };
    Ok(imgs
        .into_iter()
        .zip(lab)
        .map(|(img, label)| {
            let pixels = match &perm {
                None => img.iter().map(|&p| f64::from(p) / 255.0).collect(),
                Some(p) => p.iter().map(|&k| f64::from(img[k]) / 255.0).collect(),
            };
            PixelSequence { pixels, label }
        })
        .collect())
}

/// Keep only the listed digits, relabelled by their position in `digits`.
pub fn filter_digits(seqs: Vec<PixelSequence>, digits: &[u8]) -> Vec<PixelSequence> {
    seqs.into_iter()
        .filter_map(|mut s| {
            digits.iter().position(|&d| d == s.label).map(|k| {
                s.label = k as u8;
                s
            })
        })
        .collect()
}

/// Split a training file in order: the first `min(50000, ⌊5n/6⌋)` items
/// train, the next `min(10000, rest)` validate.
pub fn split_train_valid<T>(mut items: Vec<T>) -> (Vec<T>, Vec<T>) {
    let n = items.len();
    let train = (5 * n / 6).min(50_000);
    let mut rest = items.split_off(train);
    rest.truncate(10_000);
    (items, rest)
}
