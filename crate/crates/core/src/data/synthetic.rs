//! Deterministic generators standing in for external corpora.

use super::{ClassificationDataset, FeatureTable, LabeledSequence, PianoRoll, IMAGE_PIXELS};
use crate::stochastic::RngStream;

/// One sequence of the two-regime memory task.
///
/// Each step carries a random bit and a regime flag. In regime A (flag 0)
/// the target repeats the previous target; in regime B (flag 1) it is
/// overwritten by the current bit. The target before the first step is 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegimeSequence {
    pub bits: Vec<u8>,
    pub regimes: Vec<u8>,
    pub targets: Vec<u8>,
}

impl RegimeSequence {
    /// Input features of step `t`: `[bit, regime]`.
    pub fn features(&self, t: usize) -> [f64; 2] {
        [f64::from(self.bits[t]), f64::from(self.regimes[t])]
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Probability that the regime flips between consecutive steps.
pub const REGIME_SWITCH: f64 = 0.2;

pub fn two_regime(n: usize, len: usize, seed: u64) -> Vec<RegimeSequence> {
    let mut rng = RngStream::new(seed, 0x2e9);
    (0..n)
        .map(|_| {
            let mut regime = rng.below(2) as u8;
            let mut prev = 0u8;
            let mut s = RegimeSequence {
                bits: Vec::with_capacity(len),
                regimes: Vec::with_capacity(len),
                targets: Vec::with_capacity(len),
            };
            for t in 0..len {
                if t > 0 && rng.uniform() < REGIME_SWITCH {
                    regime ^= 1;
                }
                let bit = rng.below(2) as u8;
                let y = if regime == 1 { bit } else { prev };
                s.bits.push(bit);
                s.regimes.push(regime);
                s.targets.push(y);
                prev = y;
            }
            s
        })
        .collect()
}

const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];

/// Four-voice chord progressions in random major keys.
///
/// Chords are diatonic triads, mostly moving by fourths or fifths, each
/// held one to three steps, voiced bass/tenor/alto/soprano inside the
/// 88-key range. Lengths are drawn from `min_len..=max_len`.
pub fn chorales(n: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<PianoRoll> {
    assert!(min_len >= 2 && max_len >= min_len);
    let mut rng = RngStream::new(seed, 0xc40);
    (0..n)
        .map(|_| {
            let key = rng.below(12) as i32;
            let len = min_len + rng.below(max_len - min_len + 1);
            let mut degree = 0usize;
            let mut steps = Vec::with_capacity(len);
            while steps.len() < len {
                let triad: Vec<i32> = (0..3)
                    .map(|k| key + MAJOR[(degree + 2 * k) % 7] + 12 * ((degree + 2 * k) / 7) as i32)
                    .collect();
                // piano index 0 is A0 (MIDI 21); voice into fixed registers
                let voices = [
                    triad[0] + 36 - 21,
                    triad[(1 + degree) % 3] + 48 - 21,
                    triad[2] + 55 - 21,
                    triad[0] + 60 - 21,
                ];
                let mut chord: Vec<u8> = voices.iter().map(|&v| v.clamp(0, 87) as u8).collect();
                chord.sort_unstable();
                chord.dedup();
                let hold = 1 + rng.below(3);
                for _ in 0..hold {
                    if steps.len() < len {
                        steps.push(chord.clone());
                    }
                }
                let r = rng.uniform();
                degree = if r < 0.4 {
                    (degree + 3) % 7
                } else if r < 0.75 {
                    (degree + 4) % 7
                } else if r < 0.9 {
                    (degree + 1) % 7
                } else {
                    0
                };
            }
            PianoRoll { steps }
        })
        .collect()
}

fn plot(img: &mut [f64], x: f64, y: f64, intensity: f64) {
    // bilinear splat keeps strokes smooth under sub-pixel offsets
    let (x0, y0) = (x.floor(), y.floor());
    for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
        let (px, py) = (x0 + dx, y0 + dy);
        if (0.0..28.0).contains(&px) && (0.0..28.0).contains(&py) {
            let w = (1.0 - (x - px).abs()) * (1.0 - (y - py).abs());
            let k = py as usize * 28 + px as usize;
            img[k] = (img[k] + intensity * w).min(1.0);
        }
    }
}

fn thick_point(img: &mut [f64], x: f64, y: f64, thickness: f64) {
    let r = thickness / 2.0;
    let steps = (r * 2.0).ceil() as i32;
    for i in -steps..=steps {
        for j in -steps..=steps {
            let (ox, oy) = (i as f64 * 0.5, j as f64 * 0.5);
            if ox * ox + oy * oy <= r * r {
                plot(img, x + ox, y + oy, 0.5);
            }
        }
    }
}

/// Handwriting-like 28×28 images of the digits 0 (rings) and 1 (strokes),
/// alternating labels, as raw bytes.
pub fn digit_images(n: usize, seed: u64) -> (Vec<Vec<u8>>, Vec<u8>) {
    let mut rng = RngStream::new(seed, 0xd191);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let label = (k % 2) as u8;
        let mut img = vec![0.0; IMAGE_PIXELS];
        let thickness = 1.5 + 1.5 * rng.uniform();
        let cx = 14.0 + 3.0 * (rng.uniform() - 0.5);
        let cy = 14.0 + 3.0 * (rng.uniform() - 0.5);
        if label == 0 {
            let rx = 4.5 + 3.0 * rng.uniform();
            let ry = 7.0 + 3.0 * rng.uniform();
            let tilt = 0.4 * (rng.uniform() - 0.5);
            let gap = 0.6 * rng.uniform();
            let mut a = gap;
            while a < std::f64::consts::TAU {
                let (s, c) = a.sin_cos();
                let (x, y) = (rx * c, ry * s);
                thick_point(
                    &mut img,
                    cx + x * tilt.cos() - y * tilt.sin(),
                    cy + x * tilt.sin() + y * tilt.cos(),
                    thickness,
                );
                a += 0.08;
            }
        } else {
            let half = 7.0 + 3.0 * rng.uniform();
            let slant = 0.5 * (rng.uniform() - 0.5);
            let mut s = -half;
            while s <= half {
                thick_point(&mut img, cx + slant * s, cy + s, thickness);
                s += 0.25;
            }
        }
        let bytes = img
            .iter()
            .map(|&v| {
                let noisy = if v > 0.0 {
                    v * (0.85 + 0.15 * rng.uniform())
                } else {
                    0.0
                };
                (noisy * 255.0).round() as u8
            })
            .collect();
        images.push(bytes);
        labels.push(label);
    }
    (images, labels)
}

/// Balanced two-class token sequences: class 1 sequences draw more often
/// from the upper half of the vocabulary.
pub fn token_classification(
    n: usize,
    vocab: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> ClassificationDataset {
    assert!(vocab >= 2 && min_len >= 1 && max_len >= min_len);
    let mut rng = RngStream::new(seed, 0x7e47);
    let half = vocab / 2;
    let items = (0..n)
        .map(|k| {
            let label = k % 2;
            let len = min_len + rng.below(max_len - min_len + 1);
            let tokens = (0..len)
                .map(|_| {
                    let upper = rng.uniform() < if label == 1 { 0.7 } else { 0.3 };
                    if upper {
                        half + rng.below(vocab - half)
                    } else {
                        rng.below(half)
                    }
                })
                .collect();
            LabeledSequence { tokens, label }
        })
        .collect();
    ClassificationDataset {
        vocab,
        classes: 2,
        items,
        rejected: 0,
    }
}

/// Random unit-scale feature vectors, one per token.
pub fn feature_table(vocab: usize, dim: usize, seed: u64) -> FeatureTable {
    let mut rng = RngStream::new(seed, 0xfea7);
    FeatureTable {
        dim,
        rows: (0..vocab)
            .map(|_| {
                (0..dim)
                    .map(|_| rng.normal() / (dim as f64).sqrt())
                    .collect()
            })
            .collect(),
    }
}
