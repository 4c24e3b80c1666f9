//! Byte-histogram features.
//!
//! A file is summarized by the 256-bin histogram of its bytes concatenated
//! with the histogram of the same bytes after a per-byte circular right
//! rotation (4 bits by default), giving a 512-dimensional count vector. A
//! separate "uneva" vector counts adjacent repeats per byte value and is
//! only used to gate similarity decisions.

use crate::error::{Error, Result};

/// Dimension of a feature vector: two 256-bin histograms.
pub const FEATURE_DIM: usize = 512;

/// Default per-byte rotation used for the second histogram.
pub const DEFAULT_SHIFT: u32 = 4;

/// Concatenated histogram `hist(f) | hist(f >> shift)` plus file length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureVector {
    counts: Box<[u64; FEATURE_DIM]>,
    file_length: u64,
}

impl FeatureVector {
    /// Builds a vector from raw counts. Intended for tests and baselines
    /// that need counts not produced by [`extract_features`].
    pub fn from_counts(counts: [u64; FEATURE_DIM], file_length: u64) -> Self {
        FeatureVector {
            counts: Box::new(counts),
            file_length,
        }
    }

    pub fn counts(&self) -> &[u64; FEATURE_DIM] {
        &self.counts
    }

    pub fn file_length(&self) -> u64 {
        self.file_length
    }
}

/// Per byte value, the number of positions `i >= 1` with `f[i] == f[i-1] == v`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnevaVector {
    pub runs: [u32; 256],
}

impl UnevaVector {
    pub fn total(&self) -> u64 {
        self.runs.iter().map(|&r| u64::from(r)).sum()
    }

    /// Max absolute per-value difference, the distance used by the uneva gate.
    pub fn distance(&self, other: &UnevaVector) -> u32 {
        self.runs
            .iter()
            .zip(other.runs.iter())
            .map(|(&a, &b)| a.abs_diff(b))
            .max()
            .unwrap_or(0)
    }
}

/// Circular right rotation of a single byte.
#[inline]
pub fn rotate_byte(b: u8, shift: u32) -> u8 {
    b.rotate_right(shift)
}

pub fn extract_features(bytes: &[u8], shift_bits: u32) -> Result<FeatureVector> {
    if bytes.is_empty() {
        return Err(Error::EmptyFile);
    }
    if !(1..=7).contains(&shift_bits) {
        return Err(Error::InvalidShift(shift_bits));
    }
    let mut plain = [0u64; 256];
    for &b in bytes {
        plain[b as usize] += 1;
    }
    // The rotated histogram is a permutation of the plain one.
    let mut counts = [0u64; FEATURE_DIM];
    counts[..256].copy_from_slice(&plain);
    for (v, &c) in plain.iter().enumerate() {
        counts[256 + rotate_byte(v as u8, shift_bits) as usize] += c;
    }
    Ok(FeatureVector {
        counts: Box::new(counts),
        file_length: bytes.len() as u64,
    })
}

pub fn compute_uneva(bytes: &[u8]) -> Result<UnevaVector> {
    if bytes.is_empty() {
        return Err(Error::EmptyFile);
    }
    let mut runs = [0u32; 256];
    for w in bytes.windows(2) {
        if w[0] == w[1] {
            let r = &mut runs[w[0] as usize];
            *r = r.saturating_add(1);
        }
    }
    Ok(UnevaVector { runs })
}

/// Log-damped counts, `ln(1 + c)`, fed to the kernel feature map.
pub fn transform_counts(x: &FeatureVector) -> Vec<f64> {
    x.counts.iter().map(|&c| (c as f64).ln_1p()).collect()
}

/// Same transform on real-valued counts.
pub fn transform_real_counts(counts: &[f64]) -> Vec<f64> {
    counts.iter().map(|&c| c.ln_1p()).collect()
}
