//! Discrepancy, symmetrized pair scoring, threshold calibration and the
//! on-disk formats for models and digests.

mod digest;
mod model_format;

pub use digest::{DIGEST_MAGIC, DIGEST_VERSION, Digest, DigestEncoding, make_digest};
pub use model_format::{MODEL_MAGIC, MODEL_VERSION, deserialize_model, model_fingerprint, serialize_model};

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default uneva gate.
pub const DEFAULT_TAU_UNEVA: u32 = 80;
/// Fallback delta threshold when neither a flag nor the model provides one.
pub const DEFAULT_TAU_DELTA: f64 = 0.05;
/// Fallback digest-distance threshold for the histogram-modulus baseline.
pub const DEFAULT_TAU_DIGEST: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub tau_delta: f64,
    /// Threshold on the baseline's digest distance.
    pub tau_digest: u32,
    pub tau_uneva: u32,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            tau_delta: DEFAULT_TAU_DELTA,
            tau_digest: DEFAULT_TAU_DIGEST,
            tau_uneva: DEFAULT_TAU_UNEVA,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub delta: f64,
    pub uneva_dist: u32,
    pub similar: bool,
    pub thresholds: ThresholdConfig,
}

/// Squared L2 distance between the row means of two batches.
pub fn mmd_batch(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("batches {:?} and {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let ma = a.mean_axis(Axis(0)).expect("rows");
    let mb = b.mean_axis(Axis(0)).expect("rows");
    Ok(ma.iter().zip(mb.iter()).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Cross-network distance `||a.h_G - b.h_D||`.
pub fn directed_distance(a: &Digest, b: &Digest) -> f64 {
    l2(&a.h_g, &b.h_d)
}

/// `delta = (||a.h_G - b.h_D|| + ||b.h_G - a.h_D||) / 2`, gated by uneva.
pub fn pair_score(a: &Digest, b: &Digest, cfg: &ThresholdConfig) -> Result<SimilarityScore> {
    if a.model_fingerprint != b.model_fingerprint {
        return Err(Error::ModelMismatch(hex::encode(a.model_fingerprint), hex::encode(b.model_fingerprint)));
    }
    if a.h_g.len() != b.h_g.len() || a.h_d.len() != b.h_d.len() {
        return Err(Error::Shape("digests have different embedding sizes".into()));
    }
    let delta = 0.5 * (directed_distance(a, b) + directed_distance(b, a));
    let uneva_dist = a.uneva.distance(&b.uneva);
    Ok(SimilarityScore {
        delta,
        uneva_dist,
        similar: delta <= cfg.tau_delta && uneva_dist <= cfg.tau_uneva,
        thresholds: *cfg,
    })
}

/// Largest threshold whose false-positive rate on `negatives` stays at or
/// below `target_fp` (a pair is called similar when its score is `<=` the
/// threshold). When every negative may pass, returns the largest score seen.
pub fn calibrate_from_scores(positives: &[f64], negatives: &[f64], target_fp: f64) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InsufficientData("calibration needs positive and negative pairs".into()));
    }
    if !(0.0..=1.0).contains(&target_fp) {
        return Err(Error::Config(format!("target_fp must be in [0, 1], got {target_fp}")));
    }
    if positives.len() < 20 || negatives.len() < 20 {
        log::warn!(
            "calibrating on {} positive / {} negative pairs; at least 20 of each recommended",
            positives.len(),
            negatives.len()
        );
    }
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    let allowed = (target_fp * neg.len() as f64 + 1e-9).floor() as usize;
    if allowed >= neg.len() {
        return Ok(positives.iter().chain(negatives).copied().fold(f64::NEG_INFINITY, f64::max));
    }
    Ok(neg[allowed].next_down())
}

/// Calibrates `tau_delta` on scored digest pairs; the uneva gate is left at
/// `tau_uneva`.
pub fn calibrate_threshold(
    positive_pairs: &[(Digest, Digest)],
    negative_pairs: &[(Digest, Digest)],
    target_fp: f64,
    tau_uneva: u32,
) -> Result<ThresholdConfig> {
    let open = ThresholdConfig { tau_delta: f64::INFINITY, tau_digest: u32::MAX, tau_uneva: u32::MAX };
    let score = |pairs: &[(Digest, Digest)]| -> Result<Vec<f64>> {
        pairs.iter().map(|(a, b)| pair_score(a, b, &open).map(|s| s.delta)).collect()
    };
    let tau_delta = calibrate_from_scores(&score(positive_pairs)?, &score(negative_pairs)?, target_fp)?;
    Ok(ThresholdConfig { tau_delta, tau_uneva, ..ThresholdConfig::default() })
}
