//! Evaluation harness: detection on perturbed pairs, rejection of distinct
//! pairs, robustness curves and report writers.
//!
//! Every hasher goes through the [`Hasher`] trait, so the learned digest,
//! the histogram-modulus baseline and external tools are scored on exactly
//! the same pairs.

pub mod external;
mod svg;

pub use svg::curve_svg;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DEFAULT_SHIFT, UnevaVector, compute_uneva, extract_features};
use crate::perturb::{PerturbKind, PerturbSpec, apply_edit, protected_regions_pe, substitute_bits};
use crate::sahash::{SahashDigest, sahash_digest, sahash_distance, sahash_similar};
use crate::similarity::{Digest, ThresholdConfig, make_digest, pair_score};
use crate::trainer::{TrainedModel, derive_seed};

/// Outcome of comparing two files with one hasher. Lower distance is more
/// similar for every hasher.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub distance: f64,
    pub uneva_dist: u32,
    pub similar: bool,
}

pub trait Hasher: Sync {
    type Digest: Send + Sync;

    fn name(&self) -> &str;
    fn digest(&self, bytes: &[u8]) -> Result<Self::Digest>;
    fn compare(&self, a: &Self::Digest, b: &Self::Digest) -> Result<PairScore>;

    fn score(&self, a: &[u8], b: &[u8]) -> Result<PairScore> {
        self.compare(&self.digest(a)?, &self.digest(b)?)
    }
}

pub struct AkashHasher<'a> {
    pub model: &'a TrainedModel,
    pub thresholds: ThresholdConfig,
}

impl Hasher for AkashHasher<'_> {
    type Digest = Digest;

    fn name(&self) -> &str {
        "akash"
    }

    fn digest(&self, bytes: &[u8]) -> Result<Digest> {
        make_digest(self.model, bytes)
    }

    fn compare(&self, a: &Digest, b: &Digest) -> Result<PairScore> {
        let s = pair_score(a, b, &self.thresholds)?;
        Ok(PairScore { distance: s.delta, uneva_dist: s.uneva_dist, similar: s.similar })
    }
}

pub struct SahashHasher {
    pub thresholds: ThresholdConfig,
    pub shift_bits: u32,
}

impl SahashHasher {
    pub fn new(thresholds: ThresholdConfig) -> Self {
        SahashHasher { thresholds, shift_bits: DEFAULT_SHIFT }
    }
}

impl Hasher for SahashHasher {
    type Digest = (SahashDigest, UnevaVector);

    fn name(&self) -> &str {
        "sahash"
    }

    fn digest(&self, bytes: &[u8]) -> Result<Self::Digest> {
        Ok((sahash_digest(&extract_features(bytes, self.shift_bits)?)?, compute_uneva(bytes)?))
    }

    /// Digests with different moduli cannot be compared; such pairs count
    /// as dissimilar at infinite distance.
    fn compare(&self, a: &Self::Digest, b: &Self::Digest) -> Result<PairScore> {
        let uneva_dist = a.1.distance(&b.1);
        match sahash_distance(&a.0, &b.0) {
            Ok(d) => Ok(PairScore {
                distance: d as f64,
                uneva_dist,
                similar: sahash_similar(d, uneva_dist, &self.thresholds),
            }),
            Err(Error::IncompatibleDigests(..)) => Ok(PairScore { distance: f64::INFINITY, uneva_dist, similar: false }),
            Err(e) => Err(e),
        }
    }
}

/// Scores every pair in parallel, preserving order.
pub fn score_pairs<H: Hasher, A: AsRef<[u8]> + Sync, B: AsRef<[u8]> + Sync>(
    hasher: &H,
    pairs: &[(A, B)],
) -> Result<Vec<PairScore>> {
    pairs.par_iter().map(|(a, b)| hasher.score(a.as_ref(), b.as_ref())).collect()
}

/// Fraction of (original, perturbed) pairs called similar.
pub fn detection_rate<H: Hasher, A: AsRef<[u8]> + Sync, B: AsRef<[u8]> + Sync>(
    hasher: &H,
    pairs: &[(A, B)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no perturbed pairs".into()));
    }
    let scores = score_pairs(hasher, pairs)?;
    Ok(scores.iter().filter(|s| s.similar).count() as f64 / pairs.len() as f64)
}

/// Samples unordered index pairs `i < j` without repetition. Returns all
/// pairs, in order, when `n_pairs` covers every combination.
pub fn sample_distinct_pairs(n_files: usize, n_pairs: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n_files < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 files, have {n_files}")));
    }
    let total = n_files * (n_files - 1) / 2;
    let unrank = |mut k: usize| {
        let mut i = 0;
        loop {
            let row = n_files - 1 - i;
            if k < row {
                return (i, i + 1 + k);
            }
            k -= row;
            i += 1;
        }
    };
    if n_pairs >= total {
        return Ok((0..total).map(unrank).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, total, n_pairs).into_vec();
    picks.sort_unstable();
    Ok(picks.into_iter().map(unrank).collect())
}

/// Fraction of sampled distinct-file pairs called dissimilar.
pub fn distinct_rejection_rate<H: Hasher, F: AsRef<[u8]> + Sync>(
    hasher: &H,
    corpus: &[F],
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let idx = sample_distinct_pairs(corpus.len(), n_pairs, seed)?;
    let digests: Vec<H::Digest> = corpus.par_iter().map(|f| hasher.digest(f.as_ref())).collect::<Result<_>>()?;
    let scores: Vec<PairScore> =
        idx.par_iter().map(|&(i, j)| hasher.compare(&digests[i], &digests[j])).collect::<Result<_>>()?;
    Ok(scores.iter().filter(|s| !s.similar).count() as f64 / scores.len() as f64)
}

/// Distances observed at one perturbation magnitude.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    /// Flipped bits for substitution curves, edited bytes for edit curves.
    pub magnitude: usize,
    pub mean: f64,
    pub distances: Vec<f64>,
    /// Set when the file had too few mutable bits for this magnitude.
    pub skipped: bool,
}

impl CurvePoint {
    fn from_distances(magnitude: usize, distances: Vec<f64>) -> Self {
        let mean = distances.iter().sum::<f64>() / distances.len() as f64;
        CurvePoint { magnitude, mean, distances, skipped: false }
    }
}

/// Distance between `f` and `trials` substitution mutants for each rho in
/// the grid.
pub fn robustness_curve<H: Hasher>(
    hasher: &H,
    f: &[u8],
    rho_grid: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    if rho_grid.contains(&0) || rho_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("rho grid must be nondecreasing and >= 1".into()));
    }
    let original = hasher.digest(f)?;
    let regions = protected_regions_pe(f);
    rho_grid
        .iter()
        .map(|&rho| {
            let distances: Result<Vec<f64>> = (0..trials)
                .into_par_iter()
                .map(|trial| {
                    let s = derive_seed(derive_seed(seed, rho as u64), trial as u64);
                    let m = substitute_bits(f, rho, &regions, s)?;
                    Ok(hasher.compare(&original, &hasher.digest(&m)?)?.distance)
                })
                .collect();
            match distances {
                Ok(d) => Ok(CurvePoint::from_distances(rho, d)),
                Err(Error::NoMutableBytes { .. }) => {
                    log::warn!("rho={rho}: file has too few mutable bits, point skipped");
                    Ok(CurvePoint { magnitude: rho, mean: f64::NAN, distances: Vec::new(), skipped: true })
                }
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// A seeded random insertion, deletion, overlay append or overlay truncation
/// of `1..=max_len` bytes.
pub fn random_edit(f: &[u8], max_len: usize, seed: u64) -> Result<PerturbSpec> {
    if f.len() < 2 {
        return Err(Error::InsufficientData("file too short to edit".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_len = max_len.max(1);
    // Removals leave at least one byte behind.
    let kind = match rng.random_range(0..4) {
        0 => {
            let len = rng.random_range(1..=max_len);
            let mut payload = vec![0u8; len];
            rng.fill(payload.as_mut_slice());
            PerturbKind::InsertBytes { offset: rng.random_range(0..=f.len()), payload }
        }
        1 => {
            let len = rng.random_range(1..=max_len.min(f.len() - 1));
            PerturbKind::DeleteBytes { offset: rng.random_range(0..=f.len() - len), len }
        }
        2 => PerturbKind::AppendOverlay { len: rng.random_range(1..=max_len) },
        _ => PerturbKind::TruncateOverlay { len: rng.random_range(1..=max_len.min(f.len() - 1)) },
    };
    Ok(PerturbSpec { kind, seed: rng.random() })
}

/// Distance between `f` and `events` independent random edits, grouped by
/// the number of bytes each edit touched.
pub fn edit_curve<H: Hasher>(hasher: &H, f: &[u8], events: usize, max_len: usize, seed: u64) -> Result<Vec<CurvePoint>> {
    let original = hasher.digest(f)?;
    let scored: Vec<(usize, f64)> = (0..events)
        .into_par_iter()
        .map(|event| {
            let spec = random_edit(f, max_len, derive_seed(seed, event as u64))?;
            let m = apply_edit(f, &spec)?;
            log::debug!("edit event {event}: {spec}, {} -> {} bytes", f.len(), m.len());
            Ok((spec.magnitude(), hasher.compare(&original, &hasher.digest(&m)?)?.distance))
        })
        .collect::<Result<_>>()?;
    let mut grouped: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (m, d) in scored {
        grouped.entry(m).or_default().push(d);
    }
    Ok(grouped.into_iter().map(|(m, d)| CurvePoint::from_distances(m, d)).collect())
}

/// Merges curves from several files, magnitude by magnitude.
pub fn merge_curves(curves: &[Vec<CurvePoint>]) -> Vec<CurvePoint> {
    let mut grouped: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for p in curves.iter().flatten().filter(|p| !p.skipped) {
        grouped.entry(p.magnitude).or_default().extend(&p.distances);
    }
    grouped.into_iter().map(|(m, d)| CurvePoint::from_distances(m, d)).collect()
}

/// Largest integer threshold whose false-positive rate on `negatives` stays
/// at or below `target_fp` (similar means `distance <= t`). `None` when even
/// a threshold of zero admits too many negatives.
pub fn calibrate_integer(negatives: &[u64], target_fp: f64) -> Result<Option<u64>> {
    if negatives.is_empty() {
        return Err(Error::InsufficientData("no negative pairs".into()));
    }
    if !(0.0..=1.0).contains(&target_fp) {
        return Err(Error::Config(format!("target_fp must be in [0, 1], got {target_fp}")));
    }
    let mut neg = negatives.to_vec();
    neg.sort_unstable();
    let allowed = (target_fp * neg.len() as f64 + 1e-9).floor() as usize;
    if allowed >= neg.len() {
        return Ok(neg.last().copied());
    }
    Ok(neg[allowed].checked_sub(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    BitSub,
    Insert,
    Delete,
    Overlay,
    Truncate,
}

impl Scenario {
    pub const ALL: [Scenario; 5] =
        [Scenario::BitSub, Scenario::Insert, Scenario::Delete, Scenario::Overlay, Scenario::Truncate];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::BitSub => "bitsub",
            Scenario::Insert => "insert",
            Scenario::Delete => "delete",
            Scenario::Overlay => "overlay",
            Scenario::Truncate => "truncate",
        }
    }

    /// Report column: substitution, insertion or deletion.
    pub fn group(self) -> &'static str {
        match self {
            Scenario::BitSub => "substitution",
            Scenario::Insert | Scenario::Overlay => "insertion",
            Scenario::Delete | Scenario::Truncate => "deletion",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

/// Mutant generation settings shared by all hashers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub scenarios: Vec<Scenario>,
    /// Upper bound for the uniformly drawn number of flipped bits.
    pub rho_max: usize,
    /// Edit sizes are drawn from `1..=max(1, edit_fraction * len)`.
    pub edit_fraction: f64,
    pub distinct_pairs: usize,
    pub seed: u64,
}

impl Default for EvalPlan {
    fn default() -> Self {
        EvalPlan { scenarios: Scenario::ALL.to_vec(), rho_max: 500, edit_fraction: 0.01, distinct_pairs: 10_000, seed: 0 }
    }
}

/// One perturbed copy of a corpus file.
#[derive(Clone, Debug)]
pub struct PerturbedCase {
    pub file: usize,
    pub scenario: Scenario,
    pub spec: PerturbSpec,
    pub mutant: Vec<u8>,
}

/// Builds one mutant per (scenario, file). Files too small for the drawn
/// perturbation are skipped and counted.
pub fn make_mutant(f: &[u8], scenario: Scenario, plan: &EvalPlan, seed: u64) -> Result<PerturbSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_len = ((plan.edit_fraction * f.len() as f64).floor() as usize).max(1);
    let kind = match scenario {
        Scenario::BitSub => PerturbKind::BitSubstitution { rho: rng.random_range(1..=plan.rho_max.max(1)) },
        Scenario::Insert => {
            let len = rng.random_range(1..=max_len);
            let mut payload = vec![0u8; len];
            rng.fill(payload.as_mut_slice());
            PerturbKind::InsertBytes { offset: rng.random_range(0..=f.len()), payload }
        }
        Scenario::Delete | Scenario::Truncate => {
            if f.len() < 2 {
                return Err(Error::InsufficientData("file too short to delete from".into()));
            }
            let len = rng.random_range(1..=max_len.min(f.len() - 1));
            if scenario == Scenario::Delete {
                PerturbKind::DeleteBytes { offset: rng.random_range(0..=f.len() - len), len }
            } else {
                PerturbKind::TruncateOverlay { len }
            }
        }
        Scenario::Overlay => PerturbKind::AppendOverlay { len: rng.random_range(1..=max_len) },
    };
    Ok(PerturbSpec { kind, seed: rng.random() })
}

pub fn build_cases<F: AsRef<[u8]> + Sync>(corpus: &[F], plan: &EvalPlan) -> Result<(Vec<PerturbedCase>, usize)> {
    let jobs: Vec<(Scenario, usize)> =
        plan.scenarios.iter().flat_map(|&s| (0..corpus.len()).map(move |i| (s, i))).collect();
    let built: Vec<Option<PerturbedCase>> = jobs
        .par_iter()
        .map(|&(scenario, file)| {
            let f = corpus[file].as_ref();
            let seed = derive_seed(derive_seed(plan.seed, scenario as u64 + 1), file as u64);
            let made = make_mutant(f, scenario, plan, seed).and_then(|spec| Ok((apply_edit(f, &spec)?, spec)));
            match made {
                Ok((mutant, spec)) => Ok(Some(PerturbedCase { file, scenario, spec, mutant })),
                Err(Error::NoMutableBytes { .. } | Error::InsufficientData(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let skipped = built.iter().filter(|c| c.is_none()).count();
    Ok((built.into_iter().flatten().collect(), skipped))
}

/// One line of the per-pair CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRow {
    pub file_a: String,
    pub file_b: String,
    /// Scenario name, or `distinct` for pairs of different files.
    pub class: String,
    pub score: PairScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub pairs: usize,
    pub similar: usize,
    pub detection_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HasherReport {
    pub hasher: String,
    /// One entry per scenario, plus the substitution/insertion/deletion groups.
    pub perturbed: Vec<ClassSummary>,
    pub distinct_pairs: usize,
    pub distinct_rejected: usize,
    pub distinct_rejection_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Maps the neutral rate names onto the usual classifier terms.
    pub legend: BTreeMap<String, String>,
    pub plan: EvalPlan,
    pub thresholds: ThresholdConfig,
    pub corpus_files: usize,
    pub skipped_mutants: usize,
    pub hashers: Vec<HasherReport>,
}

impl EvalReport {
    pub fn new(plan: EvalPlan, thresholds: ThresholdConfig, corpus_files: usize, skipped_mutants: usize) -> Self {
        let legend = [
            ("detection_rate", "true positive ratio on perturbed pairs"),
            ("distinct_rejection_rate", "true negative ratio on distinct-file pairs"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        EvalReport { legend, plan, thresholds, corpus_files, skipped_mutants, hashers: Vec::new() }
    }
}

/// Scores the shared cases and distinct pairs with one hasher.
pub fn evaluate<H: Hasher, F: AsRef<[u8]> + Sync>(
    hasher: &H,
    names: &[String],
    corpus: &[F],
    cases: &[PerturbedCase],
    distinct: &[(usize, usize)],
) -> Result<(HasherReport, Vec<PairRow>)> {
    if names.len() != corpus.len() {
        return Err(Error::Shape(format!("{} names for {} files", names.len(), corpus.len())));
    }
    let digests: Vec<H::Digest> = corpus.par_iter().map(|f| hasher.digest(f.as_ref())).collect::<Result<_>>()?;
    let case_scores: Vec<PairScore> = cases
        .par_iter()
        .map(|c| hasher.compare(&digests[c.file], &hasher.digest(&c.mutant)?))
        .collect::<Result<_>>()?;
    let distinct_scores: Vec<PairScore> =
        distinct.par_iter().map(|&(i, j)| hasher.compare(&digests[i], &digests[j])).collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(cases.len() + distinct.len());
    let mut per_class: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (c, s) in cases.iter().zip(&case_scores) {
        for key in [c.scenario.name(), c.scenario.group()] {
            let e = per_class.entry(key.to_string()).or_default();
            e.0 += 1;
            e.1 += usize::from(s.similar);
        }
        rows.push(PairRow {
            file_a: names[c.file].clone(),
            file_b: format!("{}#{}", names[c.file], c.spec),
            class: c.scenario.name().to_string(),
            score: *s,
        });
    }
    for (&(i, j), s) in distinct.iter().zip(&distinct_scores) {
        rows.push(PairRow { file_a: names[i].clone(), file_b: names[j].clone(), class: "distinct".into(), score: *s });
    }
    let perturbed = per_class
        .into_iter()
        .map(|(class, (pairs, similar))| ClassSummary {
            class,
            pairs,
            similar,
            detection_rate: similar as f64 / pairs as f64,
        })
        .collect();
    let rejected = distinct_scores.iter().filter(|s| !s.similar).count();
    let report = HasherReport {
        hasher: hasher.name().to_string(),
        perturbed,
        distinct_pairs: distinct.len(),
        distinct_rejected: rejected,
        distinct_rejection_rate: if distinct.is_empty() { f64::NAN } else { rejected as f64 / distinct.len() as f64 },
    };
    Ok((report, rows))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_pairs_csv<W: Write>(rows: &[PairRow], mut w: W) -> Result<()> {
    writeln!(w, "file_a,file_b,class,delta,uneva_dist,similar")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            csv_field(&r.file_a),
            csv_field(&r.file_b),
            r.class,
            r.score.distance,
            r.score.uneva_dist,
            r.score.similar
        )?;
    }
    Ok(())
}

pub fn write_curve_csv<W: Write>(points: &[CurvePoint], mut w: W) -> Result<()> {
    writeln!(w, "magnitude,trial,distance")?;
    for p in points {
        for (trial, d) in p.distances.iter().enumerate() {
            writeln!(w, "{},{trial},{d}", p.magnitude)?;
        }
    }
    Ok(())
}
